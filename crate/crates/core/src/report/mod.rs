//! Report artifacts: machine-readable CSV/JSON records plus PNG figures, and
//! cross-model comparison tables.
//!
//! CSV and JSON values are written at full precision; rounding to four
//! decimals happens only in figures and printed tables.

mod canvas;

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::{EvaluationReport, RocCurve};
use canvas::{fit, Canvas, BLACK, GREY, PALETTE, WHITE};

pub const METRICS_JSON: &str = "metrics.json";
pub const CONFUSION_CSV: &str = "confusion_matrix.csv";
pub const CONFUSION_PNG: &str = "confusion_matrix.png";
pub const ROC_PNG: &str = "roc.png";
pub const PER_CLASS_CSV: &str = "per_class.csv";
pub const COMPARISON_CSV: &str = "comparison.csv";

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("malformed report {path}: {message}")]
    Malformed { path: PathBuf, message: String },
    #[error("no reports to compare")]
    EmptyInput,
    #[error("reports disagree on class names: {0}")]
    ClassMismatch(String),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> ReportError + '_ {
    move |source| ReportError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn csv_io(path: &Path) -> impl Fn(csv::Error) -> ReportError + '_ {
    move |e| ReportError::Io {
        path: path.to_path_buf(),
        source: e.into(),
    }
}

/// File-name-safe form of a class name.
pub fn file_stem(class_name: &str) -> String {
    class_name
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

pub fn roc_csv_name(class_name: &str) -> String {
    format!("roc_{}.csv", file_stem(class_name))
}

/// Legend text of each class's curve in `roc.png`.
pub fn roc_legend_entries(report: &EvaluationReport) -> Vec<String> {
    report
        .per_class
        .iter()
        .map(|m| match m.auc {
            Some(auc) => format!("{} (AUC = {auc:.4})", m.class_name),
            None => format!("{} (AUC undefined)", m.class_name),
        })
        .collect()
}

/// Writes every report artifact into `out_dir` and returns the paths.
pub fn emit_report(report: &EvaluationReport, out_dir: &Path) -> Result<Vec<PathBuf>, ReportError> {
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let mut written = Vec::new();

    let path = out_dir.join(METRICS_JSON);
    let json = serde_json::to_string_pretty(report).expect("report serializes");
    fs::write(&path, json + "\n").map_err(io_err(&path))?;
    written.push(path);

    let path = out_dir.join(CONFUSION_CSV);
    write_confusion_csv(report, &path)?;
    written.push(path);

    let path = out_dir.join(PER_CLASS_CSV);
    write_per_class_csv(report, &path)?;
    written.push(path);

    for (m, roc) in report.per_class.iter().zip(&report.roc_curves) {
        if let Some(roc) = roc {
            let path = out_dir.join(roc_csv_name(&m.class_name));
            write_roc_csv(roc, &path)?;
            written.push(path);
        }
    }

    let path = out_dir.join(CONFUSION_PNG);
    save_png(&confusion_figure(report), &path)?;
    written.push(path);

    let path = out_dir.join(ROC_PNG);
    save_png(&roc_figure(report), &path)?;
    written.push(path);
    Ok(written)
}

pub fn read_report(path: &Path) -> Result<EvaluationReport, ReportError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| ReportError::Malformed {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

fn write_confusion_csv(report: &EvaluationReport, path: &Path) -> Result<(), ReportError> {
    let mut w = csv::Writer::from_path(path).map_err(csv_io(path))?;
    let mut header = vec!["true\\predicted".to_string()];
    header.extend(report.class_names().iter().cloned());
    w.write_record(&header).map_err(csv_io(path))?;
    for (name, row) in report.class_names().iter().zip(&report.confusion.counts) {
        let mut rec = vec![name.clone()];
        rec.extend(row.iter().map(u64::to_string));
        w.write_record(&rec).map_err(csv_io(path))?;
    }
    w.flush().map_err(io_err(path))
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |v| v.to_string())
}

fn write_per_class_csv(report: &EvaluationReport, path: &Path) -> Result<(), ReportError> {
    let mut w = csv::Writer::from_path(path).map_err(csv_io(path))?;
    w.write_record([
        "class",
        "precision",
        "recall",
        "f1",
        "support",
        "auc",
        "precision_degenerate",
        "recall_degenerate",
    ])
    .map_err(csv_io(path))?;
    for m in &report.per_class {
        w.write_record([
            m.class_name.clone(),
            m.precision.to_string(),
            m.recall.to_string(),
            m.f1.to_string(),
            m.support.to_string(),
            opt(m.auc),
            m.precision_degenerate.to_string(),
            m.recall_degenerate.to_string(),
        ])
        .map_err(csv_io(path))?;
    }
    w.flush().map_err(io_err(path))
}

/// `threshold,fpr,tpr`; the leading infinite threshold is written as `inf`.
fn write_roc_csv(roc: &RocCurve, path: &Path) -> Result<(), ReportError> {
    let mut w = csv::Writer::from_path(path).map_err(csv_io(path))?;
    w.write_record(["threshold", "fpr", "tpr"]).map_err(csv_io(path))?;
    for (t, (fpr, tpr)) in roc.thresholds.iter().zip(&roc.points) {
        w.write_record([t.to_string(), fpr.to_string(), tpr.to_string()])
            .map_err(csv_io(path))?;
    }
    w.flush().map_err(io_err(path))
}

/// Reads `(fpr, tpr)` points back from a `roc_<class>.csv` file.
pub fn read_roc_csv(path: &Path) -> Result<Vec<(f64, f64)>, ReportError> {
    let mut r = csv::Reader::from_path(path).map_err(csv_io(path))?;
    let malformed = |message: String| ReportError::Malformed {
        path: path.to_path_buf(),
        message,
    };
    let mut points = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| malformed(e.to_string()))?;
        let num = |i: usize| rec[i].parse::<f64>().map_err(|e| malformed(format!("`{}`: {e}", &rec[i])));
        points.push((num(1)?, num(2)?));
    }
    Ok(points)
}

fn save_png(canvas: &Canvas, path: &Path) -> Result<(), ReportError> {
    canvas.image.save(path).map_err(|e| ReportError::Io {
        path: path.to_path_buf(),
        source: io::Error::other(e),
    })
}

/// Heatmap of counts, darker for larger; each cell annotated with its count.
fn confusion_figure(report: &EvaluationReport) -> Canvas {
    let k = report.confusion.num_classes() as i64;
    let names = report.class_names();
    let cell = 90;
    let (left, top) = (150, 70);
    let (w, h) = (left + k * cell + 30, top + k * cell + 70);
    let mut c = Canvas::new(w as u32, h as u32);
    c.text_centred(left + k * cell / 2, 20, "Confusion matrix", 2, BLACK);
    c.text_centred(left + k * cell / 2, top + k * cell + 50, "Predicted", 2, BLACK);
    c.text_vertical(20, top + k * cell / 2, "True", 2, BLACK);
    let max = report.confusion.counts.iter().flatten().copied().max().unwrap_or(0).max(1) as f64;
    for (i, row) in report.confusion.counts.iter().enumerate() {
        for (j, &count) in row.iter().enumerate() {
            let t = count as f64 / max;
            let shade = |lo: f64, hi: f64| (hi + (lo - hi) * t).round() as u8;
            let fill = image::Rgb([shade(8.0, 247.0), shade(48.0, 251.0), shade(107.0, 255.0)]);
            let (x, y) = (left + j as i64 * cell, top + i as i64 * cell);
            c.fill_rect(x, y, cell, cell, fill);
            c.stroke_rect(x, y, cell, cell, GREY);
            let ink = if t > 0.5 { WHITE } else { BLACK };
            c.text_centred(x + cell / 2, y + cell / 2, &count.to_string(), 2, ink);
        }
    }
    for (i, name) in names.iter().enumerate() {
        let label = fit(name, 10);
        let mid = i as i64 * cell + cell / 2;
        c.text(left - 10 - Canvas::text_width(&label, 1), top + mid - 4, &label, 1, BLACK);
        c.text_centred(left + mid, top + k * cell + 14, &label, 1, BLACK);
    }
    c
}

/// One ROC curve per class with the chance diagonal and an AUC legend.
fn roc_figure(report: &EvaluationReport) -> Canvas {
    let (size, left, top) = (420_i64, 70_i64, 50_i64);
    let legend = roc_legend_entries(report);
    let legend_h = 14 * legend.len() as i64 + 10;
    let mut c = Canvas::new((left + size + 30) as u32, (top + size + 60 + legend_h) as u32);
    c.text_centred(left + size / 2, 20, "ROC curves", 2, BLACK);
    c.text_centred(left + size / 2, top + size + 36, "False positive rate", 1, BLACK);
    c.text_vertical(16, top + size / 2, "True positive rate", 1, BLACK);
    let to_px = |(fpr, tpr): (f64, f64)| (left as f64 + fpr * size as f64, (top + size) as f64 - tpr * size as f64);
    c.stroke_rect(left, top, size + 1, size + 1, BLACK);
    for tick in [0.0, 0.5, 1.0] {
        let (x, y) = to_px((tick, tick));
        let label = format!("{tick:.1}");
        c.text_centred(x.round() as i64, top + size + 14, &label, 1, BLACK);
        c.text(left - 8 - Canvas::text_width(&label, 1), y.round() as i64 - 4, &label, 1, BLACK);
    }
    c.dashed_line(to_px((0.0, 0.0)), to_px((1.0, 1.0)), GREY, 6.0);
    for (i, roc) in report.roc_curves.iter().enumerate() {
        let colour = PALETTE[i % PALETTE.len()];
        if let Some(roc) = roc {
            for seg in roc.points.windows(2) {
                let (a, b) = (to_px(seg[0]), to_px(seg[1]));
                c.line(a.0.round() as i64, a.1.round() as i64, b.0.round() as i64, b.1.round() as i64, colour, 2);
            }
        }
        let y = top + size + 56 + 14 * i as i64;
        c.fill_rect(left, y + 2, 16, 4, colour);
        c.text(left + 24, y, &legend[i], 1, BLACK);
    }
    c
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub model: String,
    pub accuracy: f64,
    pub macro_f1: f64,
    /// `(precision, recall)` per class.
    pub per_class: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub class_names: Vec<String>,
    pub rows: Vec<ComparisonRow>,
}

/// One row per model, by descending accuracy, then descending macro F1,
/// then model name.
pub fn compare(reports: &BTreeMap<String, EvaluationReport>) -> Result<ComparisonTable, ReportError> {
    let first = reports.values().next().ok_or(ReportError::EmptyInput)?;
    let class_names = first.class_names().to_vec();
    let mut rows = Vec::with_capacity(reports.len());
    for (model, r) in reports {
        if r.class_names() != class_names.as_slice() {
            return Err(ReportError::ClassMismatch(format!(
                "`{model}` has {:?}, expected {class_names:?}",
                r.class_names()
            )));
        }
        rows.push(ComparisonRow {
            model: model.clone(),
            accuracy: r.accuracy,
            macro_f1: r.macro_f1,
            per_class: r.per_class.iter().map(|m| (m.precision, m.recall)).collect(),
        });
    }
    rows.sort_by(|a, b| {
        b.accuracy
            .total_cmp(&a.accuracy)
            .then(b.macro_f1.total_cmp(&a.macro_f1))
            .then_with(|| a.model.cmp(&b.model))
    });
    Ok(ComparisonTable { class_names, rows })
}

impl ComparisonTable {
    pub fn header(&self) -> Vec<String> {
        let mut h = vec!["model".to_string(), "accuracy".into(), "macro_f1".into()];
        for name in &self.class_names {
            h.push(format!("{name}_precision"));
            h.push(format!("{name}_recall"));
        }
        h
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), ReportError> {
        let mut w = csv::Writer::from_path(path).map_err(csv_io(path))?;
        w.write_record(self.header()).map_err(csv_io(path))?;
        for row in &self.rows {
            let mut rec = vec![row.model.clone(), row.accuracy.to_string(), row.macro_f1.to_string()];
            for (p, r) in &row.per_class {
                rec.push(p.to_string());
                rec.push(r.to_string());
            }
            w.write_record(&rec).map_err(csv_io(path))?;
        }
        w.flush().map_err(io_err(path))
    }
}

/// Aligned plain-text table at four decimals.
impl fmt::Display for ComparisonTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let header = self.header();
        let body: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| {
                let mut v = vec![r.model.clone(), format!("{:.4}", r.accuracy), format!("{:.4}", r.macro_f1)];
                for (p, rc) in &r.per_class {
                    v.push(format!("{p:.4}"));
                    v.push(format!("{rc:.4}"));
                }
                v
            })
            .collect();
        let widths: Vec<usize> = (0..header.len())
            .map(|i| body.iter().map(|r| r[i].len()).chain([header[i].len()]).max().unwrap())
            .collect();
        for line in std::iter::once(&header).chain(&body) {
            let cells: Vec<String> = line.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
            writeln!(f, "{}", cells.join("  ").trim_end())?;
        }
        Ok(())
    }
}
