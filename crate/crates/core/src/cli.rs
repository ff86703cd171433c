//! Command-line pipeline: synth, train, predict, consensus, evaluate,
//! report. Every command is driven by one TOML experiment configuration and
//! reruns byte-identically for a fixed config and seed.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::events::{consensus, ConsensusSpec};
use crate::infer::{predict_record, InferConfig};
use crate::io::{
    read_annotation, read_manifest, read_record, resolve, write_annotation, Annotation, Record,
    Split,
};
use crate::metrics::{scorer_vs_consensus, EvalRecord, EvaluationReport};
use crate::model::{load_model, save_model};
use crate::preprocess::{downsample, normalize};
use crate::train::train_loop;

#[derive(Debug, Parser)]
#[command(name = "respir", about = "Convolutional apnea-hypopnea event detector")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    /// Experiment configuration (TOML). Missing file = defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Override the configured random seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Worker threads (compute is single-threaded; values above 1 are
    /// accepted and ignored).
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,

    /// Override the configured output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic dataset and its manifest.
    Synth,
    /// Train a detector on the train split, selecting the decision
    /// threshold on the validation split.
    Train,
    /// Run the trained detector over the test split.
    Predict,
    /// Write the scorer-consensus annotation for every record.
    Consensus,
    /// Compare every scorer, and the model if predictions exist, against
    /// leave-one-out consensus references on the test split.
    Evaluate,
    /// Render the evaluation report as CSV tables and an SVG curve plot.
    Report,
}

impl Cli {
    pub fn experiment(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
            cfg.train.seed = seed;
        }
        if let Some(out) = &self.out {
            cfg.paths.out_dir = out.to_string_lossy().into_owned();
        }
        if self.threads == 0 {
            return Err(Error::Argument("--threads must be >= 1".into()));
        }
        Ok(cfg)
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    let cfg = cli.experiment()?;
    match cli.command {
        Command::Synth => cmd_synth(&cfg),
        Command::Train => cmd_train(&cfg),
        Command::Predict => cmd_predict(&cfg),
        Command::Consensus => cmd_consensus(&cfg),
        Command::Evaluate => cmd_evaluate(&cfg),
        Command::Report => cmd_report(&cfg),
    }
}

fn manifest_path(cfg: &ExperimentConfig) -> PathBuf {
    Path::new(&cfg.paths.data_dir).join("manifest.json")
}

fn out_dir(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let dir = PathBuf::from(&cfg.paths.out_dir);
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn cmd_synth(cfg: &ExperimentConfig) -> Result<()> {
    let manifest = crate::synth::generate_dataset(&cfg.synth, cfg.seed, Path::new(&cfg.paths.data_dir))?;
    println!("wrote {}", manifest.display());
    Ok(())
}

/// Read, normalize and downsample one record to the model input rate.
fn preprocessed_record(cfg: &ExperimentConfig, manifest: &Path, relative: &str) -> Result<Record> {
    let record = read_record(&resolve(manifest, relative))?;
    downsample(&normalize(&record), cfg.preprocess.downsample_factor)
}

/// The training reference for a record: consensus over all its scorers.
fn reference_annotation(
    cfg: &ExperimentConfig,
    manifest: &Path,
    annotations: &[String],
    record: &Record,
) -> Result<Annotation> {
    let scorers: Vec<Annotation> = annotations
        .iter()
        .map(|a| read_annotation(&resolve(manifest, a)))
        .collect::<Result<_>>()?;
    if scorers.len() == 1 {
        return Ok(scorers.into_iter().next().expect("one annotation"));
    }
    let spec = ConsensusSpec::new(cfg.metrics.kappa, scorers.len());
    consensus(&scorers, &spec, cfg.metrics.consensus_fs, record.duration_s())
}

fn load_split(
    cfg: &ExperimentConfig,
    manifest_file: &Path,
    split: Split,
) -> Result<Vec<(Record, Annotation)>> {
    let manifest = read_manifest(manifest_file)?;
    let mut out = Vec::new();
    for entry in manifest.entries.iter().filter(|e| e.split == split) {
        let record = preprocessed_record(cfg, manifest_file, &entry.record)?;
        let reference = reference_annotation(cfg, manifest_file, &entry.annotations, &record)?;
        out.push((record, reference));
    }
    Ok(out)
}

fn checkpoint_path(out: &Path) -> PathBuf {
    out.join("model.ckpt.json")
}

/// Total number of events across every scorer annotation of a split; this
/// is the dataset-size proxy that fixes the number of steps per epoch.
fn scorer_event_count(manifest_file: &Path, split: Split) -> Result<usize> {
    let manifest = read_manifest(manifest_file)?;
    let mut total = 0;
    for entry in manifest.entries.iter().filter(|e| e.split == split) {
        for a in &entry.annotations {
            total += read_annotation(&resolve(manifest_file, a))?.events.len();
        }
    }
    Ok(total)
}

fn cmd_train(cfg: &ExperimentConfig) -> Result<()> {
    let manifest_file = manifest_path(cfg);
    let train = load_split(cfg, &manifest_file, Split::Train)?;
    let validation = load_split(cfg, &manifest_file, Split::Validation)?;
    let mut train_cfg = cfg.train.clone();
    train_cfg.seed = cfg.seed;
    if train_cfg.epoch_events.is_none() {
        train_cfg.epoch_events = Some(scorer_event_count(&manifest_file, Split::Train)?);
    }
    let outcome = train_loop(&cfg.model, &cfg.preprocess, &train, &validation, &train_cfg, &cfg.infer)?;

    let out = out_dir(cfg)?;
    let meta = serde_json::json!({
        "theta": outcome.theta,
        "val_f1": outcome.val_f1,
        "best_epoch": outcome.best_epoch,
    });
    save_model(&outcome.model, meta, &checkpoint_path(&out))?;

    let mut csv = String::from("epoch,loss,classification,localization,val_f1,theta\n");
    for l in &outcome.log {
        writeln!(
            csv,
            "{},{:.6},{:.6},{:.6},{:.6},{:.2}",
            l.epoch, l.loss, l.classification, l.localization, l.val_f1, l.theta
        )
        .expect("string write");
    }
    std::fs::write(out.join("train_log.csv"), csv)?;
    println!(
        "best epoch {} theta {:.2} validation F1 {:.4}",
        outcome.best_epoch, outcome.theta, outcome.val_f1
    );
    Ok(())
}

fn cmd_predict(cfg: &ExperimentConfig) -> Result<()> {
    let out = out_dir(cfg)?;
    let model = load_model(&checkpoint_path(&out))?;
    let theta = model_theta(&out)?;
    let grid = crate::grid::build_grid(&model.cfg.grid)?;
    let infer_cfg = InferConfig { theta, ..cfg.infer };

    let manifest_file = manifest_path(cfg);
    let manifest = read_manifest(&manifest_file)?;
    let pred_dir = out.join("predictions");
    std::fs::create_dir_all(&pred_dir)?;
    for entry in manifest.entries.iter().filter(|e| e.split == Split::Test) {
        let record = preprocessed_record(cfg, &manifest_file, &entry.record)?;
        let prediction = predict_record(&model, &grid, &record, &infer_cfg)?;
        if prediction.padded {
            eprintln!("note: record {} was padded to one full window", record.record_id);
        }
        write_annotation(
            &prediction.annotation,
            &pred_dir.join(format!("{}.model.json", record.record_id)),
        )?;
    }
    println!("wrote predictions to {}", pred_dir.display());
    Ok(())
}

/// The decision threshold selected during training, stored in the
/// checkpoint metadata.
fn model_theta(out: &Path) -> Result<f64> {
    let (manifest, _) = crate::nn::checkpoint::load(&checkpoint_path(out))?;
    manifest.meta["extra"]["theta"]
        .as_f64()
        .ok_or_else(|| Error::Format("checkpoint is missing the selected theta".into()))
}

fn cmd_consensus(cfg: &ExperimentConfig) -> Result<()> {
    let manifest_file = manifest_path(cfg);
    let manifest = read_manifest(&manifest_file)?;
    let out = out_dir(cfg)?;
    let dir = out.join("consensus");
    std::fs::create_dir_all(&dir)?;
    for entry in &manifest.entries {
        let record = read_record(&resolve(&manifest_file, &entry.record))?;
        let annotation = reference_annotation(cfg, &manifest_file, &entry.annotations, &record)?;
        write_annotation(&annotation, &dir.join(format!("{}.consensus.json", record.record_id)))?;
    }
    println!("wrote consensus annotations to {}", dir.display());
    Ok(())
}

fn cmd_evaluate(cfg: &ExperimentConfig) -> Result<()> {
    let manifest_file = manifest_path(cfg);
    let manifest = read_manifest(&manifest_file)?;
    let out = out_dir(cfg)?;
    let pred_dir = out.join("predictions");

    let mut records = Vec::new();
    for entry in manifest.entries.iter().filter(|e| e.split == Split::Test) {
        let record = read_record(&resolve(&manifest_file, &entry.record))?;
        let scorers: Vec<Annotation> = entry
            .annotations
            .iter()
            .map(|a| read_annotation(&resolve(&manifest_file, a)))
            .collect::<Result<_>>()?;
        let model_file = pred_dir.join(format!("{}.model.json", record.record_id));
        let model = if model_file.exists() { Some(read_annotation(&model_file)?) } else { None };
        records.push(EvalRecord {
            record_id: record.record_id.clone(),
            hours_of_sleep: record.hours_of_sleep,
            duration_s: record.duration_s(),
            scorers,
            model,
        });
    }
    let report = scorer_vs_consensus(&records, &cfg.metrics)?;
    std::fs::write(out.join("report.json"), serde_json::to_string_pretty(&report)?)?;
    println!("wrote {}", out.join("report.json").display());
    Ok(())
}

fn cmd_report(cfg: &ExperimentConfig) -> Result<()> {
    let out = out_dir(cfg)?;
    let text = std::fs::read_to_string(out.join("report.json"))?;
    let report: EvaluationReport =
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("report.json: {e}")))?;

    let mut rows: Vec<&crate::metrics::ScorerReport> = report.scorers.iter().collect();
    if let Some(model) = &report.model {
        rows.push(model);
    }

    let mut csv = String::from(
        "scorer,f1_mean,f1_std,precision_mean,recall_mean,ahi_error_mean,ahi_error_std,diagnostic_accuracy\n",
    );
    for r in &rows {
        writeln!(
            csv,
            "{},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4}",
            r.scorer_id,
            r.f1_mean,
            r.f1_std,
            r.precision_mean,
            r.recall_mean,
            r.ahi_error_mean,
            r.ahi_error_std,
            r.diagnostic_accuracy
        )
        .expect("string write");
    }
    std::fs::write(out.join("report.csv"), csv)?;

    let mut curve = String::from("iou_threshold");
    for r in &rows {
        write!(curve, ",{}", r.scorer_id).expect("string write");
    }
    curve.push('\n');
    if let Some(first) = rows.first() {
        for (i, &(threshold, _)) in first.f1_vs_iou.iter().enumerate() {
            write!(curve, "{threshold:.2}").expect("string write");
            for r in &rows {
                write!(curve, ",{:.4}", r.f1_vs_iou[i].1).expect("string write");
            }
            curve.push('\n');
        }
    }
    std::fs::write(out.join("f1_curve.csv"), curve)?;
    std::fs::write(out.join("f1_curve.svg"), f1_curve_svg(&rows))?;
    println!("wrote report.csv, f1_curve.csv, f1_curve.svg in {}", out.display());
    Ok(())
}

const SVG_COLORS: [&str; 8] =
    ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"];

/// Minimal hand-rolled SVG line chart of F1 against the IoU threshold.
fn f1_curve_svg(rows: &[&crate::metrics::ScorerReport]) -> String {
    let (width, height) = (640.0, 480.0);
    let (left, right, top, bottom) = (60.0, 20.0, 20.0, 50.0);
    let plot_w = width - left - right;
    let plot_h = height - top - bottom;
    let x_of = |iou: f64| left + iou * plot_w;
    let y_of = |f1: f64| top + (1.0 - f1) * plot_h;

    let mut svg = String::new();
    write!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" \
         viewBox=\"0 0 {width} {height}\">\n\
         <rect width=\"{width}\" height=\"{height}\" fill=\"white\"/>\n"
    )
    .expect("string write");
    // axes and grid
    for i in 0..=10 {
        let v = i as f64 / 10.0;
        writeln!(
            svg,
            "<line x1=\"{:.1}\" y1=\"{top}\" x2=\"{:.1}\" y2=\"{:.1}\" stroke=\"#ddd\"/>",
            x_of(v),
            x_of(v),
            top + plot_h
        )
        .expect("string write");
        writeln!(
            svg,
            "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"12\" text-anchor=\"middle\">{v:.1}</text>",
            x_of(v),
            top + plot_h + 18.0
        )
        .expect("string write");
        writeln!(
            svg,
            "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"12\" text-anchor=\"end\">{v:.1}</text>",
            left - 6.0,
            y_of(v) + 4.0
        )
        .expect("string write");
    }
    writeln!(
        svg,
        "<rect x=\"{left}\" y=\"{top}\" width=\"{plot_w}\" height=\"{plot_h}\" fill=\"none\" stroke=\"black\"/>"
    )
    .expect("string write");
    writeln!(
        svg,
        "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"14\" text-anchor=\"middle\">IoU threshold</text>",
        left + plot_w / 2.0,
        height - 12.0
    )
    .expect("string write");
    writeln!(
        svg,
        "<text x=\"16\" y=\"{:.1}\" font-size=\"14\" text-anchor=\"middle\" \
         transform=\"rotate(-90 16 {:.1})\">F1</text>",
        top + plot_h / 2.0,
        top + plot_h / 2.0
    )
    .expect("string write");

    for (ri, r) in rows.iter().enumerate() {
        let color = SVG_COLORS[ri % SVG_COLORS.len()];
        let points: Vec<String> = r
            .f1_vs_iou
            .iter()
            .map(|&(iou, f1)| format!("{:.1},{:.1}", x_of(iou), y_of(f1)))
            .collect();
        writeln!(
            svg,
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"2\"/>",
            points.join(" ")
        )
        .expect("string write");
        writeln!(
            svg,
            "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"12\" fill=\"{color}\">{}</text>",
            left + plot_w - 90.0,
            top + 16.0 + 16.0 * ri as f64,
            r.scorer_id
        )
        .expect("string write");
    }
    svg.push_str("</svg>\n");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cli_parses_all_commands() {
        for cmd in ["synth", "train", "predict", "consensus", "evaluate", "report"] {
            Cli::try_parse_from(["respir", cmd]).unwrap();
        }
        let cli = Cli::try_parse_from([
            "respir", "train", "--config", "exp.toml", "--seed", "9", "--out", "results",
        ])
        .unwrap();
        assert_eq!(cli.seed, Some(9));
        assert_eq!(cli.out.as_deref(), Some(Path::new("results")));
    }

    #[test]
    fn seed_and_out_overrides_apply() {
        let cli = Cli::try_parse_from(["respir", "synth", "--seed", "42", "--out", "elsewhere"]).unwrap();
        let cfg = cli.experiment().unwrap();
        assert_eq!(cfg.seed, 42);
        assert_eq!(cfg.train.seed, 42);
        assert_eq!(cfg.paths.out_dir, "elsewhere");
    }

    #[test]
    fn zero_threads_rejected() {
        let cli = Cli::try_parse_from(["respir", "synth", "--threads", "0"]).unwrap();
        assert!(matches!(cli.experiment(), Err(Error::Argument(_))));
    }

    #[test]
    fn svg_is_well_formed_enough() {
        let report = crate::metrics::ScorerReport {
            scorer_id: "scorer0".into(),
            f1_mean: 0.8,
            f1_std: 0.0,
            precision_mean: 0.8,
            recall_mean: 0.8,
            ahi_error_mean: 1.0,
            ahi_error_std: 0.0,
            diagnostic_accuracy: 1.0,
            f1_vs_iou: (1..=9).map(|i| (i as f64 / 10.0, 1.0 - i as f64 / 10.0)).collect(),
        };
        let svg = f1_curve_svg(&[&report]);
        assert!(svg.starts_with("<svg"));
        assert!(svg.trim_end().ends_with("</svg>"));
        assert_eq!(svg.matches("<polyline").count(), 1);
        assert!(svg.contains("scorer0"));
    }
}
