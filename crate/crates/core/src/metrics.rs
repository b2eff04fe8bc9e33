//! Binary-mask segmentation metrics and report rendering.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Threshold for predictions in the generator's `[-1,1]` range.
pub const TANH_THRESHOLD: f32 = 0.0;
/// Threshold for probability-valued predictions.
pub const PROBABILITY_THRESHOLD: f32 = 0.5;

/// Maps each value to 1 if it is strictly above `threshold`, else 0.
pub fn binarize(prediction: &Tensor, threshold: f32) -> Tensor {
    prediction.map(|v| if v > threshold { 1.0 } else { 0.0 })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }
}

fn as_bit(v: f32) -> Result<bool> {
    if v == 0.0 {
        Ok(false)
    } else if v == 1.0 {
        Ok(true)
    } else {
        Err(Error::Domain(format!("mask value {v} is not 0 or 1")))
    }
}

/// Pixel counts of `pred` against `truth`; both must be `{0,1}` masks of equal dims.
pub fn confusion(pred: &Tensor, truth: &Tensor) -> Result<ConfusionCounts> {
    if pred.dims() != truth.dims() {
        return Err(Error::DimsMismatch { op: "confusion", left: pred.dims().to_vec(), right: truth.dims().to_vec() });
    }
    let mut c = ConfusionCounts::default();
    for (&p, &t) in pred.values().iter().zip(truth.values()) {
        match (as_bit(p)?, as_bit(t)?) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

/// `(tp + tn) / total`.
pub fn accuracy(c: &ConfusionCounts) -> Result<f64> {
    let total = c.total();
    if total == 0 {
        return Err(Error::Domain("accuracy of an empty image".into()));
    }
    Ok((c.tp + c.tn) as f64 / total as f64)
}

/// Jaccard index `tp / (tp + fp + fn)`; 1 when both masks are empty.
pub fn overlap_rate(c: &ConfusionCounts) -> f64 {
    let union = c.tp + c.fp + c.fn_;
    if union == 0 {
        1.0
    } else {
        c.tp as f64 / union as f64
    }
}

/// Harmonic mean of precision and recall; 1 when both masks are empty, 0 when
/// nothing overlaps but some pixel is wrong.
pub fn f_measure(c: &ConfusionCounts) -> f64 {
    if c.tp == 0 {
        return if c.fp == 0 && c.fn_ == 0 { 1.0 } else { 0.0 };
    }
    let p = c.tp as f64 / (c.tp + c.fp) as f64;
    let r = c.tp as f64 / (c.tp + c.fn_) as f64;
    2.0 * p * r / (p + r)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRecord {
    pub id: String,
    pub accuracy: f64,
    pub overlap_rate: f64,
    pub f_measure: f64,
}

impl MetricRecord {
    pub fn from_counts(id: impl Into<String>, c: &ConfusionCounts) -> Result<Self> {
        Ok(Self { id: id.into(), accuracy: accuracy(c)?, overlap_rate: overlap_rate(c), f_measure: f_measure(c) })
    }

    pub fn get(&self, metric: Metric) -> f64 {
        match metric {
            Metric::Accuracy => self.accuracy,
            Metric::OverlapRate => self.overlap_rate,
            Metric::FMeasure => self.f_measure,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Metric {
    Accuracy,
    OverlapRate,
    FMeasure,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::Accuracy, Metric::OverlapRate, Metric::FMeasure];

    pub fn label(self) -> &'static str {
        match self {
            Metric::Accuracy => "accuracy",
            Metric::OverlapRate => "overlap rate",
            Metric::FMeasure => "F measure",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub metric: String,
    pub minimum: f64,
    pub maximum: f64,
    pub mean: f64,
    pub std: f64,
}

/// Min, max, mean and sample (n−1) standard deviation of one metric.
pub fn summarize(records: &[MetricRecord], metric: Metric) -> Result<SummaryRow> {
    let values: Vec<f64> = records.iter().map(|r| r.get(metric)).collect();
    summarize_values(metric.label(), &values)
}

pub fn summarize_values(name: &str, values: &[f64]) -> Result<SummaryRow> {
    if values.is_empty() {
        return Err(Error::Empty("record list"));
    }
    let minimum = values.iter().copied().fold(f64::INFINITY, f64::min);
    let maximum = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let n = values.len() as f64;
    // constant input: the summed mean can be off by an ulp, the spread cannot
    let (mean, std) = if minimum == maximum {
        (minimum, 0.0)
    } else {
        let mean = values.iter().sum::<f64>() / n;
        let ss = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>();
        (mean, (ss / (n - 1.0)).sqrt())
    };
    Ok(SummaryRow { metric: name.to_string(), minimum, maximum, mean, std })
}

pub fn summarize_all(records: &[MetricRecord]) -> Result<Vec<SummaryRow>> {
    Metric::ALL.iter().map(|&m| summarize(records, m)).collect()
}

/// Tab-separated metric × {minimum, maximum, mean, standard deviation} table, four decimals.
pub fn render_summary_table(rows: &[SummaryRow]) -> String {
    let mut out = String::from("\tminimum\tmaximum\tmean\tstandard deviation\n");
    for r in rows {
        let _ = writeln!(out, "{}\t{:.4}\t{:.4}\t{:.4}\t{:.4}", r.metric, r.minimum, r.maximum, r.mean, r.std);
    }
    out
}

/// Parses [`render_summary_table`] output back into rows (values at printed precision).
pub fn parse_summary_table(text: &str) -> Result<Vec<SummaryRow>> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines.next().ok_or(Error::Empty("summary table"))?;
    if header.split('\t').skip(1).collect::<Vec<_>>() != ["minimum", "maximum", "mean", "standard deviation"] {
        return Err(Error::Dataset("summary table: unexpected header".into()));
    }
    lines
        .map(|line| {
            let cells: Vec<&str> = line.split('\t').collect();
            if cells.len() != 5 {
                return Err(Error::Dataset(format!("summary table: malformed row {line:?}")));
            }
            let num = |s: &str| {
                s.trim().parse::<f64>().map_err(|_| Error::Dataset(format!("summary table: bad number {s:?}")))
            };
            Ok(SummaryRow {
                metric: cells[0].to_string(),
                minimum: num(cells[1])?,
                maximum: num(cells[2])?,
                mean: num(cells[3])?,
                std: num(cells[4])?,
            })
        })
        .collect()
}

/// One method's row in a comparison table.
#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonRow {
    pub label: String,
    /// Summaries for accuracy, overlap rate and F measure, matched by name.
    pub summaries: Vec<SummaryRow>,
    pub train_seconds: Option<f64>,
    pub test_seconds: Option<f64>,
}

/// `12.3s`, `2min25s` or `6h0min`; `-` when absent.
pub fn format_duration(seconds: Option<f64>) -> String {
    let Some(s) = seconds else {
        return "-".to_string();
    };
    if s < 60.0 {
        return format!("{s:.1}s");
    }
    let whole = s.round() as u64;
    if whole < 3600 {
        format!("{}min{}s", whole / 60, whole % 60)
    } else {
        format!("{}h{}min", whole / 3600, whole % 3600 / 60)
    }
}

/// Tab-separated method × {accuracy, overlap rate, F measure, training time, test time},
/// metric cells as `mean ± std` with three decimals.
pub fn render_comparison_table(rows: &[ComparisonRow]) -> String {
    let mut out = String::from("\tAccuracy\tOverlap rate\tF measure\tTraining time\tTest time\n");
    for row in rows {
        out.push_str(&row.label);
        for m in Metric::ALL {
            let cell = row
                .summaries
                .iter()
                .find(|s| s.metric == m.label())
                .map_or_else(|| "-".to_string(), |s| format!("{:.3} ± {:.3}", s.mean, s.std));
            out.push('\t');
            out.push_str(&cell);
        }
        let _ = writeln!(out, "\t{}\t{}", format_duration(row.train_seconds), format_duration(row.test_seconds));
    }
    out
}

/// `id,accuracy,overlap_rate,f_measure` with six decimals per value.
pub fn render_records_csv(records: &[MetricRecord]) -> String {
    let mut out = String::from("id,accuracy,overlap_rate,f_measure\n");
    for r in records {
        let _ = writeln!(out, "{},{:.6},{:.6},{:.6}", r.id, r.accuracy, r.overlap_rate, r.f_measure);
    }
    out
}

pub fn parse_records_csv(text: &str) -> Result<Vec<MetricRecord>> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    if lines.next() != Some("id,accuracy,overlap_rate,f_measure") {
        return Err(Error::Dataset("records file: unexpected header".into()));
    }
    lines
        .map(|line| {
            let cells: Vec<&str> = line.split(',').collect();
            if cells.len() != 4 {
                return Err(Error::Dataset(format!("records file: malformed row {line:?}")));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| Error::Dataset(format!("records file: bad number {s:?}")));
            Ok(MetricRecord {
                id: cells[0].to_string(),
                accuracy: num(cells[1])?,
                overlap_rate: num(cells[2])?,
                f_measure: num(cells[3])?,
            })
        })
        .collect()
}
