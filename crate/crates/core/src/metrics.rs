//! Confusion matrices, one-vs-rest rates, ROC curves and AUC.
//!
//! Everything here is a pure function of its inputs.

use std::cmp::Ordering;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tolerance on probability rows summing to one.
pub const ROW_SUM_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("label {label} out of range for {num_classes} classes")]
    Label { label: usize, num_classes: usize },
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: u64,
        message: String,
    },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax<T: PartialOrd + Copy>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate().skip(1) {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Rows are true classes, columns predicted classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub class_names: Vec<String>,
    pub counts: Vec<Vec<u64>>,
}

pub fn default_class_names(k: usize) -> Vec<String> {
    (0..k).map(|i| format!("class_{i}")).collect()
}

impl ConfusionMatrix {
    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.num_classes()).map(|i| self.counts[i][i]).sum()
    }

    /// Samples whose true class is `k`.
    pub fn support(&self, k: usize) -> u64 {
        self.counts[k].iter().sum()
    }

    pub fn with_class_names(mut self, names: Vec<String>) -> Result<Self, MetricsError> {
        if names.len() != self.num_classes() {
            return Err(MetricsError::Shape(format!(
                "{} class names for {} classes",
                names.len(),
                self.num_classes()
            )));
        }
        self.class_names = names;
        Ok(self)
    }
}

fn check_label(label: usize, num_classes: usize) -> Result<(), MetricsError> {
    if label < num_classes {
        Ok(())
    } else {
        Err(MetricsError::Label { label, num_classes })
    }
}

pub fn confusion_matrix(y_true: &[usize], y_pred: &[usize], num_classes: usize) -> Result<ConfusionMatrix, MetricsError> {
    if y_true.len() != y_pred.len() {
        return Err(MetricsError::Shape(format!(
            "{} true labels but {} predictions",
            y_true.len(),
            y_pred.len()
        )));
    }
    let mut counts = vec![vec![0u64; num_classes]; num_classes];
    for (&t, &p) in y_true.iter().zip(y_pred) {
        check_label(t, num_classes)?;
        check_label(p, num_classes)?;
        counts[t][p] += 1;
    }
    Ok(ConfusionMatrix {
        class_names: default_class_names(num_classes),
        counts,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinaryCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl BinaryCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

/// Class `k` as positive, every other class as negative.
pub fn one_vs_rest(cm: &ConfusionMatrix, k: usize) -> Result<BinaryCounts, MetricsError> {
    check_label(k, cm.num_classes())?;
    let tp = cm.counts[k][k];
    let fp = (0..cm.num_classes()).filter(|&i| i != k).map(|i| cm.counts[i][k]).sum();
    let fn_ = (0..cm.num_classes()).filter(|&j| j != k).map(|j| cm.counts[k][j]).sum();
    Ok(BinaryCounts {
        tp,
        fp,
        fn_,
        tn: cm.total() - tp - fp - fn_,
    })
}

/// `trace / total`; equals `(TP + TN) / total` for two classes.
pub fn accuracy(cm: &ConfusionMatrix) -> Result<f64, MetricsError> {
    match cm.total() {
        0 => Err(MetricsError::UndefinedMetric("accuracy of zero samples".into())),
        total => Ok(cm.trace() as f64 / total as f64),
    }
}

/// A ratio whose `0 / 0` case is reported as zero with `degenerate` set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rate {
    pub value: f64,
    pub degenerate: bool,
}

fn rate(num: u64, den: u64) -> Rate {
    if den == 0 {
        Rate {
            value: 0.0,
            degenerate: true,
        }
    } else {
        Rate {
            value: num as f64 / den as f64,
            degenerate: false,
        }
    }
}

pub fn precision(c: &BinaryCounts) -> Rate {
    rate(c.tp, c.tp + c.fp)
}

pub fn recall(c: &BinaryCounts) -> Rate {
    rate(c.tp, c.tp + c.fn_)
}

/// Harmonic mean; zero when both inputs are zero.
pub fn f1(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Unweighted mean.
pub fn macro_average(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

/// Serializes the leading `+inf` threshold as `null`.
mod thresholds_json {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(v.iter().map(|t| t.is_finite().then_some(*t)))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        let v: Vec<Option<f64>> = Vec::deserialize(d)?;
        Ok(v.into_iter().map(|t| t.unwrap_or(f64::INFINITY)).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    /// `(false_positive_rate, true_positive_rate)` from `(0, 0)` to `(1, 1)`.
    pub points: Vec<(f64, f64)>,
    /// Score threshold of each point (`score >= t` is positive); the first is `+inf`.
    #[serde(with = "thresholds_json")]
    pub thresholds: Vec<f64>,
    pub auc: f64,
}

/// Trapezoidal area under a polyline given by `(x, y)` points.
pub fn trapezoid_area(points: &[(f64, f64)]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0)
        .sum()
}

/// ROC over every distinct score, descending; tied scores move together.
///
/// The area is accumulated in integer counts and divided once, so it is
/// exact up to a single rounding.
pub fn roc_curve(y_true: &[bool], scores: &[f64]) -> Result<RocCurve, MetricsError> {
    if y_true.len() != scores.len() {
        return Err(MetricsError::Shape(format!(
            "{} labels but {} scores",
            y_true.len(),
            scores.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(MetricsError::Shape("NaN score".into()));
    }
    let pos = y_true.iter().filter(|&&y| y).count() as u64;
    let neg = y_true.len() as u64 - pos;
    if pos == 0 || neg == 0 {
        return Err(MetricsError::UndefinedMetric(
            "ROC needs both positive and negative samples".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(Ordering::Equal));

    let mut points = vec![(0.0, 0.0)];
    let mut thresholds = vec![f64::INFINITY];
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut twice_area: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let threshold = scores[order[i]];
        let (tp0, fp0) = (tp, fp);
        while i < order.len() && scores[order[i]] == threshold {
            if y_true[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        twice_area += (fp - fp0) as u128 * (tp + tp0) as u128;
        points.push((fp as f64 / neg as f64, tp as f64 / pos as f64));
        thresholds.push(threshold);
    }
    let auc = twice_area as f64 / (2 * pos as u128 * neg as u128) as f64;
    Ok(RocCurve { points, thresholds, auc })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class_name: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
    /// `None` when the class is absent, or is the only class present.
    pub auc: Option<f64>,
    /// Precision was `0 / 0`: the class was never predicted.
    pub precision_degenerate: bool,
    /// Recall was `0 / 0`: the class has no samples.
    pub recall_degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub num_samples: u64,
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    /// Mean over the classes whose AUC is defined.
    pub macro_auc: Option<f64>,
    pub per_class: Vec<ClassMetrics>,
    pub confusion: ConfusionMatrix,
    /// One entry per class; `None` where the AUC is undefined.
    pub roc_curves: Vec<Option<RocCurve>>,
    pub warnings: Vec<String>,
}

impl EvaluationReport {
    pub fn class_names(&self) -> &[String] {
        &self.confusion.class_names
    }
}

fn check_scores(y_true: &[usize], y_score: &[Vec<f64>], k: usize) -> Result<(), MetricsError> {
    if y_true.len() != y_score.len() {
        return Err(MetricsError::Shape(format!(
            "{} labels but {} score rows",
            y_true.len(),
            y_score.len()
        )));
    }
    for (i, row) in y_score.iter().enumerate() {
        if row.len() != k {
            return Err(MetricsError::Shape(format!("score row {i} has {} entries, expected {k}", row.len())));
        }
        let sum: f64 = row.iter().sum();
        if !((sum - 1.0).abs() <= ROW_SUM_TOLERANCE && row.iter().all(|v| (0.0..=1.0).contains(v))) {
            return Err(MetricsError::Shape(format!("score row {i} is not a probability vector (sum {sum})")));
        }
    }
    y_true.iter().try_for_each(|&y| check_label(y, k))
}

/// Full report from labels and a probability matrix.
///
/// Predictions are row argmaxes (ties to the lowest class index); class `k`'s
/// ROC uses column `k` of the scores against `y_true == k`.
pub fn evaluate(y_true: &[usize], y_score: &[Vec<f64>], class_names: &[String]) -> Result<EvaluationReport, MetricsError> {
    let k = class_names.len();
    if k < 2 {
        return Err(MetricsError::Shape(format!("need at least 2 classes, got {k}")));
    }
    check_scores(y_true, y_score, k)?;
    let y_pred: Vec<usize> = y_score.iter().map(|row| argmax(row)).collect();
    let cm = confusion_matrix(y_true, &y_pred, k)?.with_class_names(class_names.to_vec())?;
    let accuracy = accuracy(&cm)?;

    let mut per_class = Vec::with_capacity(k);
    let mut roc_curves = Vec::with_capacity(k);
    let mut warnings = Vec::new();
    for (c, name) in class_names.iter().enumerate() {
        let counts = one_vs_rest(&cm, c)?;
        let (p, r) = (precision(&counts), recall(&counts));
        if p.degenerate {
            warnings.push(format!("class `{name}` is never predicted; precision reported as 0"));
        }
        if r.degenerate {
            warnings.push(format!("class `{name}` has no samples; recall reported as 0"));
        }
        let positives: Vec<bool> = y_true.iter().map(|&y| y == c).collect();
        let column: Vec<f64> = y_score.iter().map(|row| row[c]).collect();
        let roc = match roc_curve(&positives, &column) {
            Ok(roc) => Some(roc),
            Err(MetricsError::UndefinedMetric(_)) => {
                warnings.push(format!("AUC of class `{name}` is undefined: one-vs-rest labels are single-class"));
                None
            }
            Err(e) => return Err(e),
        };
        per_class.push(ClassMetrics {
            class_name: name.clone(),
            precision: p.value,
            recall: r.value,
            f1: f1(p.value, r.value),
            support: cm.support(c),
            auc: roc.as_ref().map(|r| r.auc),
            precision_degenerate: p.degenerate,
            recall_degenerate: r.degenerate,
        });
        roc_curves.push(roc);
    }
    let mean_of = |f: fn(&ClassMetrics) -> f64| macro_average(&per_class.iter().map(f).collect::<Vec<_>>()).unwrap();
    let aucs: Vec<f64> = per_class.iter().filter_map(|m| m.auc).collect();
    Ok(EvaluationReport {
        num_samples: cm.total(),
        accuracy,
        macro_precision: mean_of(|m| m.precision),
        macro_recall: mean_of(|m| m.recall),
        macro_f1: mean_of(|m| m.f1),
        macro_auc: macro_average(&aucs),
        per_class,
        confusion: cm,
        roc_curves,
        warnings,
    })
}

/// Per-sample model outputs; stored as `predictions.csv` with columns
/// `sample_path,true_label,score_0,...,score_{K-1}`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Predictions {
    pub sample_paths: Vec<String>,
    pub y_true: Vec<usize>,
    pub y_score: Vec<Vec<f64>>,
}

impl Predictions {
    pub fn len(&self) -> usize {
        self.y_true.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y_true.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.y_score.first().map_or(0, Vec::len)
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), MetricsError> {
        let io = |e: csv::Error| MetricsError::Io {
            path: path.to_path_buf(),
            source: e.into(),
        };
        let mut w = csv::Writer::from_path(path).map_err(io)?;
        let mut header = vec!["sample_path".to_string(), "true_label".to_string()];
        header.extend((0..self.num_classes()).map(|k| format!("score_{k}")));
        w.write_record(&header).map_err(io)?;
        for ((p, y), row) in self.sample_paths.iter().zip(&self.y_true).zip(&self.y_score) {
            let mut rec = vec![p.clone(), y.to_string()];
            rec.extend(row.iter().map(|v| v.to_string()));
            w.write_record(&rec).map_err(io)?;
        }
        w.flush().map_err(|source| MetricsError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn read_csv(path: &Path) -> Result<Self, MetricsError> {
        let parse = |line: u64, message: String| MetricsError::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        let mut r = csv::Reader::from_path(path).map_err(|e| MetricsError::Io {
            path: path.to_path_buf(),
            source: e.into(),
        })?;
        let header = r.headers().map_err(|e| parse(1, e.to_string()))?.clone();
        let k = header.len().saturating_sub(2);
        let expected: Vec<String> = ["sample_path".to_string(), "true_label".to_string()]
            .into_iter()
            .chain((0..k).map(|i| format!("score_{i}")))
            .collect();
        if k == 0 || header.iter().ne(expected.iter().map(String::as_str)) {
            return Err(parse(1, format!("expected header {}", expected.join(","))));
        }
        let mut out = Predictions::default();
        for (i, rec) in r.records().enumerate() {
            let line = i as u64 + 2;
            let rec = rec.map_err(|e| parse(line, e.to_string()))?;
            let label = rec[1].parse::<usize>().map_err(|e| parse(line, format!("true_label: {e}")))?;
            if label >= k {
                return Err(parse(line, format!("true_label {label} out of range for {k} classes")));
            }
            let scores = rec
                .iter()
                .skip(2)
                .map(|s| s.parse::<f64>().map_err(|e| parse(line, format!("score `{s}`: {e}"))))
                .collect::<Result<Vec<_>, _>>()?;
            out.sample_paths.push(rec[0].to_string());
            out.y_true.push(label);
            out.y_score.push(scores);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cm(counts: Vec<Vec<u64>>) -> ConfusionMatrix {
        ConfusionMatrix {
            class_names: default_class_names(counts.len()),
            counts,
        }
    }

    fn names(k: usize) -> Vec<String> {
        default_class_names(k)
    }

    /// Probability that a random positive outranks a random negative, ties ½.
    fn mann_whitney(y: &[bool], s: &[f64]) -> f64 {
        let (mut wins, mut pairs) = (0.0, 0.0);
        for i in (0..y.len()).filter(|&i| y[i]) {
            for j in (0..y.len()).filter(|&j| !y[j]) {
                pairs += 1.0;
                wins += match s[i].partial_cmp(&s[j]).unwrap() {
                    Ordering::Greater => 1.0,
                    Ordering::Equal => 0.5,
                    Ordering::Less => 0.0,
                };
            }
        }
        wins / pairs
    }

    #[test]
    fn confusion_matrix_examples() {
        let m = confusion_matrix(&[0, 1, 2], &[0, 1, 2], 3).unwrap();
        assert_eq!(m.counts, vec![vec![1, 0, 0], vec![0, 1, 0], vec![0, 0, 1]]);
        let m = confusion_matrix(&[0, 0, 1], &[0, 1, 1], 3).unwrap();
        assert_eq!(m.counts, vec![vec![1, 1, 0], vec![0, 1, 0], vec![0, 0, 0]]);
        let m = confusion_matrix(&[], &[], 3).unwrap();
        assert_eq!(m.total(), 0);
        assert!(matches!(confusion_matrix(&[0], &[0, 1], 3), Err(MetricsError::Shape(_))));
        assert!(matches!(
            confusion_matrix(&[0, 3], &[0, 1], 3),
            Err(MetricsError::Label { label: 3, num_classes: 3 })
        ));
    }

    #[test]
    fn one_vs_rest_examples() {
        let d = cm(vec![vec![5, 0, 0], vec![0, 5, 0], vec![0, 0, 5]]);
        assert_eq!(one_vs_rest(&d, 0).unwrap(), BinaryCounts { tp: 5, fp: 0, fn_: 0, tn: 10 });
        let m = cm(vec![vec![1, 1, 0], vec![0, 1, 0], vec![0, 0, 0]]);
        assert_eq!(one_vs_rest(&m, 1).unwrap(), BinaryCounts { tp: 1, fp: 1, fn_: 0, tn: 1 });
        assert!(matches!(one_vs_rest(&m, 3), Err(MetricsError::Label { .. })));
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy(&cm(vec![vec![3, 0], vec![0, 4]])).unwrap(), 1.0);
        let m = cm(vec![vec![1, 1, 0], vec![0, 1, 0], vec![0, 0, 0]]);
        assert_eq!(accuracy(&m).unwrap(), 2.0 / 3.0);
        // binary: rows true (pos, neg); TP = TN = 40, FP = FN = 10
        let b = cm(vec![vec![40, 10], vec![10, 40]]);
        let c = one_vs_rest(&b, 0).unwrap();
        let eq1 = (c.tp + c.tn) as f64 / (c.tp + c.tn + c.fp + c.fn_) as f64;
        assert_eq!(accuracy(&b).unwrap(), 0.8);
        assert_eq!(eq1, 0.8);
        assert!(matches!(accuracy(&cm(vec![vec![0, 0], vec![0, 0]])), Err(MetricsError::UndefinedMetric(_))));
    }

    #[test]
    fn precision_recall_f1_examples() {
        let c = BinaryCounts { tp: 99, fp: 1, fn_: 0, tn: 0 };
        assert_eq!(precision(&c), Rate { value: 0.99, degenerate: false });
        let none = BinaryCounts { tp: 0, fp: 0, fn_: 0, tn: 7 };
        assert_eq!(precision(&none), Rate { value: 0.0, degenerate: true });
        assert_eq!(recall(&none), Rate { value: 0.0, degenerate: true });
        let c = BinaryCounts { tp: 85, fp: 0, fn_: 15, tn: 0 };
        assert_eq!(recall(&c).value, 0.85);
        assert_eq!(f1(1.0, 1.0), 1.0);
        assert_eq!(f1(0.0, 0.0), 0.0);
        let benign = f1(0.98, 0.99);
        assert!((benign - 0.984974619).abs() < 1e-9);
        let macro_f1 = macro_average(&[benign, f1(0.99, 0.99), f1(0.97, 0.85)]).unwrap();
        assert!((f1(0.97, 0.85) - 0.906043956).abs() < 1e-9);
        assert!((macro_f1 - 0.9603).abs() < 5e-5);
    }

    #[test]
    fn roc_examples() {
        let r = roc_curve(&[false, false, true, true], &[0.1, 0.2, 0.8, 0.9]).unwrap();
        assert_eq!(r.auc, 1.0);
        let r = roc_curve(&[true, false, true, false], &[0.5; 4]).unwrap();
        assert_eq!(r.points, vec![(0.0, 0.0), (1.0, 1.0)]);
        assert_eq!(r.thresholds, vec![f64::INFINITY, 0.5]);
        assert_eq!(r.auc, 0.5);
        assert!(matches!(roc_curve(&[true, true], &[0.1, 0.2]), Err(MetricsError::UndefinedMetric(_))));
        assert!(matches!(roc_curve(&[true], &[0.1, 0.2]), Err(MetricsError::Shape(_))));
        let json = serde_json::to_string(&r).unwrap();
        assert_eq!(serde_json::from_str::<RocCurve>(&json).unwrap(), r);
    }

    #[test]
    fn argmax_prefers_lowest_index_on_ties() {
        assert_eq!(argmax(&[0.2, 0.5, 0.5]), 1);
        assert_eq!(argmax(&[1.0 / 3.0; 3]), 0);
    }

    #[test]
    fn one_hot_scores_give_a_perfect_report() {
        let y = [0, 1, 2, 1];
        let s: Vec<Vec<f64>> = y.iter().map(|&c| (0..3).map(|k| (k == c) as u8 as f64).collect()).collect();
        let r = evaluate(&y, &s, &names(3)).unwrap();
        assert_eq!(r.accuracy, 1.0);
        assert!(r.per_class.iter().all(|m| m.auc == Some(1.0) && m.f1 == 1.0));
        assert!(r.warnings.is_empty());
    }

    #[test]
    fn uniform_scores_predict_class_zero() {
        let y = [0, 1, 1, 2, 2, 2];
        let r = evaluate(&y, &vec![vec![1.0 / 3.0; 3]; 6], &names(3)).unwrap();
        assert_eq!(r.accuracy, 1.0 / 6.0);
        assert_eq!(r.confusion.counts, vec![vec![1, 0, 0], vec![2, 0, 0], vec![3, 0, 0]]);
        assert!(r.per_class[1].precision_degenerate && r.per_class[2].precision_degenerate);
        assert!(r.per_class.iter().all(|m| m.auc == Some(0.5)));
    }

    #[test]
    fn nine_sample_report_matches_hand_computation() {
        let y = [0, 0, 0, 1, 1, 1, 2, 2, 2];
        let s = vec![
            vec![0.7, 0.2, 0.1],
            vec![0.5, 0.3, 0.2],
            vec![0.2, 0.6, 0.2],
            vec![0.1, 0.8, 0.1],
            vec![0.3, 0.4, 0.3],
            vec![0.6, 0.3, 0.1],
            vec![0.1, 0.2, 0.7],
            vec![0.2, 0.2, 0.6],
            vec![0.1, 0.5, 0.4],
        ];
        let r = evaluate(&y, &s, &names(3)).unwrap();
        assert_eq!(r.confusion.counts, vec![vec![2, 1, 0], vec![1, 2, 0], vec![0, 1, 2]]);
        assert_eq!(r.accuracy, 6.0 / 9.0);
        let expect = [
            (2.0 / 3.0, 2.0 / 3.0, 2.0 / 3.0, 14.5 / 18.0),
            (0.5, 2.0 / 3.0, 4.0 / 7.0, 13.5 / 18.0),
            (1.0, 2.0 / 3.0, 0.8, 1.0),
        ];
        for (m, (p, rc, f, auc)) in r.per_class.iter().zip(expect) {
            assert!((m.precision - p).abs() < 1e-12);
            assert!((m.recall - rc).abs() < 1e-12);
            assert!((m.f1 - f).abs() < 1e-12);
            assert!((m.auc.unwrap() - auc).abs() < 1e-12);
            assert_eq!(m.support, 3);
        }
        assert!((r.macro_f1 - 214.0 / 315.0).abs() < 1e-12);
        assert!((r.macro_auc.unwrap() - (14.5 + 13.5 + 18.0) / 54.0).abs() < 1e-12);
    }

    #[test]
    fn absent_class_has_undefined_auc() {
        let r = evaluate(&[0, 1, 0], &[vec![0.9, 0.1, 0.0], vec![0.2, 0.7, 0.1], vec![0.6, 0.3, 0.1]], &names(3)).unwrap();
        assert_eq!(r.per_class[2].auc, None);
        assert!(r.per_class[2].recall_degenerate);
        assert_eq!(r.macro_auc, Some(1.0));
        assert!(r.roc_curves[2].is_none());
        assert_eq!(r.warnings.len(), 3);
    }

    #[test]
    fn evaluate_rejects_malformed_scores() {
        assert!(matches!(evaluate(&[0], &[vec![0.5, 0.6]], &names(2)), Err(MetricsError::Shape(_))));
        assert!(matches!(evaluate(&[0], &[vec![1.0]], &names(2)), Err(MetricsError::Shape(_))));
        assert!(matches!(evaluate(&[2], &[vec![0.5, 0.5]], &names(2)), Err(MetricsError::Label { .. })));
        assert!(matches!(evaluate(&[], &[], &names(2)), Err(MetricsError::UndefinedMetric(_))));
    }

    #[test]
    fn predictions_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("predictions.csv");
        let p = Predictions {
            sample_paths: vec!["a/b,1.png".into(), "c.png".into()],
            y_true: vec![1, 0],
            y_score: vec![vec![0.1, 0.7, 0.2], vec![1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0]],
        };
        p.write_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("sample_path,true_label,score_0,score_1,score_2\n"));
        assert_eq!(Predictions::read_csv(&path).unwrap(), p);

        std::fs::write(&path, "sample_path,true_label,score_0,score_1\nx,2,0.5,0.5\n").unwrap();
        assert!(matches!(Predictions::read_csv(&path), Err(MetricsError::Parse { line: 2, .. })));
        std::fs::write(&path, "path,label,s0\n").unwrap();
        assert!(matches!(Predictions::read_csv(&path), Err(MetricsError::Parse { line: 1, .. })));
    }

    fn binary_instance() -> impl Strategy<Value = (Vec<bool>, Vec<f64>)> {
        (2usize..60)
            .prop_flat_map(|n| {
                (
                    proptest::collection::vec(any::<bool>(), n),
                    proptest::collection::vec(0u8..8, n),
                )
            })
            .prop_filter("both classes", |(y, _)| y.iter().any(|&b| b) && y.iter().any(|&b| !b))
            .prop_map(|(y, s)| (y, s.into_iter().map(|v| v as f64 / 8.0).collect()))
    }

    fn multiclass_instance() -> impl Strategy<Value = (Vec<usize>, Vec<Vec<f64>>)> {
        (2usize..5, 1usize..40).prop_flat_map(|(k, n)| {
            (
                proptest::collection::vec(0..k, n),
                proptest::collection::vec(proptest::collection::vec(1u8..6, k), n),
            )
                .prop_map(|(y, raw)| {
                    let s = raw
                        .into_iter()
                        .map(|r| {
                            let total: f64 = r.iter().map(|&v| v as f64).sum();
                            r.into_iter().map(|v| v as f64 / total).collect()
                        })
                        .collect();
                    (y, s)
                })
        })
    }

    proptest! {
        #[test]
        fn one_vs_rest_partitions_the_total(counts in proptest::collection::vec(proptest::collection::vec(0u64..50, 4), 4)) {
            let m = cm(counts);
            let mut tp_sum = 0;
            for k in 0..4 {
                let c = one_vs_rest(&m, k).unwrap();
                prop_assert_eq!(c.total(), m.total());
                tp_sum += c.tp;
            }
            prop_assert_eq!(tp_sum, m.trace());
            if let Ok(a) = accuracy(&m) {
                prop_assert!((0.0..=1.0).contains(&a));
            }
        }

        #[test]
        fn auc_equals_mann_whitney((y, s) in binary_instance()) {
            let r = roc_curve(&y, &s).unwrap();
            prop_assert!((r.auc - mann_whitney(&y, &s)).abs() <= 1e-9);
            prop_assert!((trapezoid_area(&r.points) - r.auc).abs() <= 1e-9);
        }

        #[test]
        fn roc_is_monotone_from_origin_to_corner((y, s) in binary_instance()) {
            let r = roc_curve(&y, &s).unwrap();
            prop_assert_eq!(r.points[0], (0.0, 0.0));
            prop_assert_eq!(*r.points.last().unwrap(), (1.0, 1.0));
            prop_assert_eq!(r.points.len(), r.thresholds.len());
            for w in r.points.windows(2) {
                prop_assert!(w[0].0 <= w[1].0 && w[0].1 <= w[1].1);
            }
            prop_assert!(r.thresholds.windows(2).all(|w| w[0] > w[1]));
        }

        #[test]
        fn strictly_increasing_transform_keeps_auc((y, s) in binary_instance()) {
            let t: Vec<f64> = s.iter().map(|v| (3.0 * v).exp() - 7.0).collect();
            prop_assert_eq!(roc_curve(&y, &s).unwrap().auc, roc_curve(&y, &t).unwrap().auc);
        }

        #[test]
        fn report_is_permutation_invariant((y, s) in multiclass_instance(), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            let k = s[0].len();
            let mut order: Vec<usize> = (0..y.len()).collect();
            order.shuffle(&mut crate::nn::seeded_rng(seed, "perm"));
            let y2: Vec<usize> = order.iter().map(|&i| y[i]).collect();
            let s2: Vec<Vec<f64>> = order.iter().map(|&i| s[i].clone()).collect();
            let a = evaluate(&y, &s, &names(k)).unwrap();
            let b = evaluate(&y2, &s2, &names(k)).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn f1_lies_between_min_and_mean(p in 0.0f64..=1.0, r in 0.0f64..=1.0) {
            prop_assume!(p + r > 0.0);
            let f = f1(p, r);
            prop_assert!(p.min(r) <= f + 1e-15 && f <= (p + r) / 2.0 + 1e-15);
        }
    }
}
