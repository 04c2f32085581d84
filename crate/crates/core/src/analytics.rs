//! Surrogate-vs-ground-truth correlation and report output.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluator::logit_improvement;
use crate::merge::MixtureVector;
use crate::search::SearchReport;
use crate::search::ScoreRecord;

/// Minimum pairs a task needs, after exclusion, to get a coefficient.
pub const MIN_PAIRS: usize = 3;

/// Sample Pearson correlation coefficient.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::LengthMismatch {
            expected: xs.len(),
            actual: ys.len(),
        });
    }
    if xs.len() < 2 {
        return Err(Error::out_of_range("series length", xs.len(), 2, "inf"));
    }
    if xs.iter().chain(ys).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("correlation input".into()));
    }
    let constant = |v: &[f64]| v.iter().all(|&a| a == v[0]);
    if constant(xs) || constant(ys) {
        return Err(Error::Degenerate);
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for (&x, &y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrelationPoint {
    pub x: f64,
    pub y: f64,
    pub n_selected: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationInput {
    pub task_name: String,
    pub pairs: Vec<CorrelationPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub per_task: BTreeMap<String, f64>,
    pub average_r: f64,
    pub excluded_count: usize,
    /// Tasks left without a coefficient (too few pairs or constant series).
    pub skipped: Vec<String>,
}

/// Per-task Pearson r averaged without weights across tasks.
///
/// With `exclude_singletons`, pairs from single-dataset mixtures are
/// dropped first: their surrogate and ground truth coincide.
pub fn correlate_tasks(inputs: &[CorrelationInput], exclude_singletons: bool) -> Result<CorrelationReport> {
    let mut per_task = BTreeMap::new();
    let mut skipped = Vec::new();
    let mut excluded_count = 0;
    for input in inputs {
        let kept: Vec<&CorrelationPoint> = input
            .pairs
            .iter()
            .filter(|p| !(exclude_singletons && p.n_selected == 1))
            .collect();
        excluded_count += input.pairs.len() - kept.len();
        if kept.len() < MIN_PAIRS {
            warn!("task {}: only {} pairs after exclusion, skipped", input.task_name, kept.len());
            skipped.push(input.task_name.clone());
            continue;
        }
        let xs: Vec<f64> = kept.iter().map(|p| p.x).collect();
        let ys: Vec<f64> = kept.iter().map(|p| p.y).collect();
        match pearson(&xs, &ys) {
            Ok(r) => {
                per_task.insert(input.task_name.clone(), r);
            }
            Err(Error::Degenerate) => {
                warn!("task {}: constant series, skipped", input.task_name);
                skipped.push(input.task_name.clone());
            }
            Err(e) => return Err(e),
        }
    }
    if per_task.is_empty() {
        return Err(Error::NoCorrelation);
    }
    let average_r = per_task.values().sum::<f64>() / per_task.len() as f64;
    Ok(CorrelationReport {
        per_task,
        average_r,
        excluded_count,
        skipped,
    })
}

#[derive(Deserialize)]
struct PairRow {
    task: String,
    x: f64,
    y: f64,
    n_selected: usize,
}

/// Reads `task,x,y,n_selected` rows, grouping by task in first-seen order.
pub fn read_pairs_csv(path: impl AsRef<Path>) -> Result<Vec<CorrelationInput>> {
    let mut reader = csv::Reader::from_path(path)?;
    let mut inputs: Vec<CorrelationInput> = Vec::new();
    for row in reader.deserialize() {
        let row: PairRow = row?;
        if !(row.x.is_finite() && row.y.is_finite()) {
            return Err(Error::InvalidDataset(format!("task {}: non-finite pair", row.task)));
        }
        let point = CorrelationPoint {
            x: row.x,
            y: row.y,
            n_selected: row.n_selected,
        };
        match inputs.iter_mut().find(|i| i.task_name == row.task) {
            Some(input) => input.pairs.push(point),
            None => inputs.push(CorrelationInput {
                task_name: row.task,
                pairs: vec![point],
            }),
        }
    }
    Ok(inputs)
}

/// What supplies the x coordinate of a plot point.
#[derive(Debug, Clone, Copy)]
pub enum PlotSurrogate<'a> {
    /// Logit improvement of the merged model over the base model.
    Merged,
    /// Raw similarity score per mixture.
    Similarity(&'a BTreeMap<MixtureVector, f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotPoint {
    pub mixture: MixtureVector,
    pub n_selected: usize,
    pub x: f64,
    pub y: f64,
    pub is_singleton: bool,
}

/// Plot coordinates: `y` is the fine-tuned model's logit improvement over
/// the base accuracy, `x` per the surrogate mode.
pub fn plot_coordinates(records: &[ScoreRecord], base_acc: f64, surrogate: PlotSurrogate<'_>) -> Result<Vec<PlotPoint>> {
    records
        .iter()
        .map(|r| {
            let ft = r.finetuned_score.ok_or_else(|| {
                Error::IncompleteTable(format!("mixture {} has no fine-tuned score", r.alpha))
            })?;
            let y = logit_improvement(ft.accuracy, base_acc)?;
            let x = match surrogate {
                PlotSurrogate::Merged => logit_improvement(r.merged_score.accuracy, base_acc)?,
                PlotSurrogate::Similarity(table) => *table.get(&r.alpha).ok_or_else(|| {
                    Error::IncompleteTable(format!("mixture {} has no similarity score", r.alpha))
                })?,
            };
            Ok(PlotPoint {
                mixture: r.alpha.clone(),
                n_selected: r.alpha.count(),
                x,
                y,
                is_singleton: r.alpha.is_singleton(),
            })
        })
        .collect()
}

/// Writes plot-data CSV: `task,mixture_bits,n_selected,x,y,is_singleton`.
pub fn write_plot_csv<'a>(tasks: impl IntoIterator<Item = (&'a str, &'a [PlotPoint])>, path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["task", "mixture_bits", "n_selected", "x", "y", "is_singleton"])?;
    for (task, points) in tasks {
        for p in points {
            w.write_record([
                task.to_string(),
                p.mixture.to_string(),
                p.n_selected.to_string(),
                p.x.to_string(),
                p.y.to_string(),
                p.is_singleton.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Self::Csv),
            "json" => Ok(Self::Json),
            _ => Err(Error::InvalidConfig(format!("unknown report format {s:?}"))),
        }
    }
}

/// A report with a JSON form and a flat CSV table form.
pub trait Report: Serialize {
    fn csv_header(&self) -> Vec<String>;
    fn csv_rows(&self) -> Vec<Vec<String>>;
}

fn opt(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

impl Report for SearchReport {
    fn csv_header(&self) -> Vec<String> {
        [
            "mixture_bits",
            "n_selected",
            "merged_accuracy",
            "merged_loss",
            "finetuned_accuracy",
            "elapsed_ms",
        ]
        .map(String::from)
        .to_vec()
    }

    fn csv_rows(&self) -> Vec<Vec<String>> {
        self.records
            .iter()
            .map(|r| {
                vec![
                    r.alpha.to_string(),
                    r.alpha.count().to_string(),
                    r.merged_score.accuracy.to_string(),
                    r.merged_score.mean_loss.to_string(),
                    opt(r.finetuned_score.map(|s| s.accuracy)),
                    r.elapsed_ms.to_string(),
                ]
            })
            .collect()
    }
}

impl Report for CorrelationReport {
    fn csv_header(&self) -> Vec<String> {
        vec!["task".into(), "r".into()]
    }

    /// One row per task plus a final `__average__` row.
    fn csv_rows(&self) -> Vec<Vec<String>> {
        self.per_task
            .iter()
            .map(|(t, r)| vec![t.clone(), r.to_string()])
            .chain(std::iter::once(vec!["__average__".into(), self.average_r.to_string()]))
            .collect()
    }
}

/// Similarity of every scored mixture: `mixture_bits,metric,score`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityReport {
    pub target_name: String,
    pub rows: Vec<SimilarityRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityRow {
    pub mixture: MixtureVector,
    pub metric: crate::baselines::SimilarityMetric,
    pub score: f64,
}

impl Report for SimilarityReport {
    fn csv_header(&self) -> Vec<String> {
        vec!["mixture_bits".into(), "metric".into(), "score".into()]
    }

    fn csv_rows(&self) -> Vec<Vec<String>> {
        self.rows
            .iter()
            .map(|r| vec![r.mixture.to_string(), r.metric.to_string(), r.score.to_string()])
            .collect()
    }
}

/// Serializes a report deterministically to `path`.
pub fn emit_report<R: Report + ?Sized>(report: &R, format: ReportFormat, path: impl AsRef<Path>) -> Result<()> {
    match format {
        ReportFormat::Json => {
            let mut w = BufWriter::new(File::create(path)?);
            serde_json::to_writer_pretty(&mut w, report)?;
            w.write_all(b"\n")?;
            w.flush()?;
        }
        ReportFormat::Csv => {
            let mut w = csv::Writer::from_path(path)?;
            w.write_record(report.csv_header())?;
            for row in report.csv_rows() {
                w.write_record(row)?;
            }
            w.flush()?;
        }
    }
    Ok(())
}
