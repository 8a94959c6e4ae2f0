//! Classification metrics, ROC analysis and report artifacts.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::SampleSet;
use crate::fsutil::write_atomic;
use crate::model::{EWasteNet, Mode};
use crate::{Error, Result};

/// Rows are true classes, columns predicted classes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub classes: Vec<String>,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn zeros(classes: &[String]) -> Self {
        let c = classes.len();
        Self {
            classes: classes.to_vec(),
            counts: vec![vec![0; c]; c],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.num_classes()).map(|i| self.counts[i][i]).sum()
    }

    pub fn row_sum(&self, class: usize) -> u64 {
        self.counts[class].iter().sum()
    }

    pub fn col_sum(&self, class: usize) -> u64 {
        self.counts.iter().map(|row| row[class]).sum()
    }

    /// Header row and column of class names; the corner cell reads `true\pred`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("true\\pred");
        for c in &self.classes {
            out.push(',');
            out.push_str(&csv_field(c));
        }
        out.push('\n');
        for (name, row) in self.classes.iter().zip(&self.counts) {
            out.push_str(&csv_field(name));
            for v in row {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn confusion_matrix(truth: &[usize], predicted: &[usize], classes: &[String]) -> Result<ConfusionMatrix> {
    if truth.len() != predicted.len() {
        return Err(Error::arg(format!(
            "{} true labels but {} predictions",
            truth.len(),
            predicted.len()
        )));
    }
    let mut cm = ConfusionMatrix::zeros(classes);
    for (&t, &p) in truth.iter().zip(predicted) {
        if t >= classes.len() || p >= classes.len() {
            return Err(Error::arg(format!(
                "label pair ({t}, {p}) outside 0..{}",
                classes.len()
            )));
        }
        cm.counts[t][p] += 1;
    }
    Ok(cm)
}

/// `num / den`, or 0 with `undefined = true` when `den` is zero.
fn ratio(num: f64, den: f64) -> (f64, bool) {
    if den == 0.0 {
        (0.0, true)
    } else {
        (num / den, false)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: String,
    /// Number of samples whose true class this is.
    pub support: u64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Names of the metrics above whose denominator was zero (reported as 0).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub undefined: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    /// Scores `>= threshold` are called positive.
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    /// A class name, or `micro-average`.
    pub label: String,
    pub points: Vec<RocPoint>,
    pub auc: f64,
    /// No positives or no negatives: the curve is degenerate and `auc` is 0.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub undefined: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocReport {
    pub per_class: Vec<RocCurve>,
    pub micro_average: RocCurve,
    pub micro_average_auc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub samples: u64,
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    /// Support-weighted averages, reported next to the macro ones.
    pub weighted_precision: f64,
    pub weighted_recall: f64,
    pub weighted_f1: f64,
    pub mcc: f64,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub mcc_undefined: bool,
    pub per_class: Vec<ClassMetrics>,
    pub confusion: ConfusionMatrix,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub roc: Option<RocReport>,
}

/// Multiclass Matthews correlation (Gorodkin's R_K) from the confusion matrix.
fn gorodkin_mcc(cm: &ConfusionMatrix) -> (f64, bool) {
    let s = cm.total() as f64;
    let c = cm.trace() as f64;
    let k = cm.num_classes();
    let (mut pt, mut pp, mut tt) = (0.0, 0.0, 0.0);
    for i in 0..k {
        let (p, t) = (cm.col_sum(i) as f64, cm.row_sum(i) as f64);
        pt += p * t;
        pp += p * p;
        tt += t * t;
    }
    ratio(c * s - pt, ((s * s - pp) * (s * s - tt)).sqrt())
}

/// Accuracy, per-class and averaged precision/recall/F1, and MCC.
pub fn classification_metrics(cm: &ConfusionMatrix) -> Result<MetricsReport> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::arg("metrics need at least one evaluated sample"));
    }
    let per_class: Vec<ClassMetrics> = (0..cm.num_classes())
        .map(|i| {
            let tp = cm.counts[i][i] as f64;
            let (precision, p_undef) = ratio(tp, cm.col_sum(i) as f64);
            let (recall, r_undef) = ratio(tp, cm.row_sum(i) as f64);
            let (f1, f_undef) = ratio(2.0 * precision * recall, precision + recall);
            let undefined = [("precision", p_undef), ("recall", r_undef), ("f1", f_undef)]
                .iter()
                .filter(|(_, u)| *u)
                .map(|(n, _)| n.to_string())
                .collect();
            ClassMetrics {
                class: cm.classes[i].clone(),
                support: cm.row_sum(i),
                precision,
                recall,
                f1,
                undefined,
            }
        })
        .collect();
    let k = per_class.len() as f64;
    let mean = |f: fn(&ClassMetrics) -> f64| per_class.iter().map(f).sum::<f64>() / k;
    let weighted =
        |f: fn(&ClassMetrics) -> f64| per_class.iter().map(|m| f(m) * m.support as f64).sum::<f64>() / total as f64;
    let (mcc, mcc_undefined) = gorodkin_mcc(cm);
    Ok(MetricsReport {
        samples: total,
        accuracy: cm.trace() as f64 / total as f64,
        macro_precision: mean(|m| m.precision),
        macro_recall: mean(|m| m.recall),
        macro_f1: mean(|m| m.f1),
        weighted_precision: weighted(|m| m.precision),
        weighted_recall: weighted(|m| m.recall),
        weighted_f1: weighted(|m| m.f1),
        mcc,
        mcc_undefined,
        per_class,
        confusion: cm.clone(),
        roc: None,
    })
}

/// Sweeps every distinct score as a threshold, highest first. The curve
/// starts at (0, 0) with a threshold above every score.
fn binary_roc(label: String, mut pairs: Vec<(f64, bool)>) -> RocCurve {
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0));
    let pos = pairs.iter().filter(|p| p.1).count() as f64;
    let neg = pairs.len() as f64 - pos;
    let top = pairs.first().map_or(1.0, |p| p.0);
    let mut points = vec![RocPoint {
        threshold: top + 1.0,
        fpr: 0.0,
        tpr: 0.0,
    }];
    let (mut tp, mut fp) = (0.0, 0.0);
    let mut i = 0;
    while i < pairs.len() {
        let threshold = pairs[i].0;
        while i < pairs.len() && pairs[i].0 == threshold {
            if pairs[i].1 {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
            i += 1;
        }
        points.push(RocPoint {
            threshold,
            fpr: ratio(fp, neg).0,
            tpr: ratio(tp, pos).0,
        });
    }
    let undefined = pos == 0.0 || neg == 0.0;
    let auc = if undefined {
        0.0
    } else {
        points
            .windows(2)
            .map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0)
            .sum::<f64>()
            .clamp(0.0, 1.0)
    };
    RocCurve {
        label,
        points,
        auc,
        undefined,
    }
}

fn check_scores(scores: &[Vec<f32>], labels: &[usize]) -> Result<usize> {
    if scores.len() != labels.len() {
        return Err(Error::arg(format!("{} score rows but {} labels", scores.len(), labels.len())));
    }
    let c = scores.first().map_or(0, Vec::len);
    if c < 2 {
        return Err(Error::arg("ROC analysis needs at least two classes"));
    }
    for (i, (row, &label)) in scores.iter().zip(labels).enumerate() {
        if row.len() != c || label >= c {
            return Err(Error::arg(format!("sample {i}: {} scores, label {label}, expected {c} classes", row.len())));
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::arg(format!("sample {i}: non-finite score")));
        }
    }
    Ok(c)
}

/// One-vs-rest ROC of `class`.
pub fn roc_curve(scores: &[Vec<f32>], labels: &[usize], class: usize, name: &str) -> Result<RocCurve> {
    let c = check_scores(scores, labels)?;
    if class >= c {
        return Err(Error::arg(format!("class {class} outside 0..{c}")));
    }
    let pairs = scores.iter().zip(labels).map(|(row, &l)| (row[class] as f64, l == class)).collect();
    Ok(binary_roc(name.to_string(), pairs))
}

/// Pools every (sample, class) one-vs-rest decision into a single curve.
pub fn micro_average_roc(scores: &[Vec<f32>], labels: &[usize]) -> Result<RocCurve> {
    check_scores(scores, labels)?;
    let pairs = scores
        .iter()
        .zip(labels)
        .flat_map(|(row, &l)| row.iter().enumerate().map(move |(k, &s)| (s as f64, k == l)))
        .collect();
    Ok(binary_roc("micro-average".into(), pairs))
}

/// Full report from per-sample class probabilities.
pub fn evaluate(scores: &[Vec<f32>], labels: &[usize], classes: &[String]) -> Result<MetricsReport> {
    let c = check_scores(scores, labels)?;
    if c != classes.len() {
        return Err(Error::arg(format!("{c} scores per sample for {} classes", classes.len())));
    }
    let predicted: Vec<usize> = scores.iter().map(|row| argmax(row)).collect();
    let mut report = classification_metrics(&confusion_matrix(labels, &predicted, classes)?)?;
    let per_class = classes
        .iter()
        .enumerate()
        .map(|(k, name)| roc_curve(scores, labels, k, name))
        .collect::<Result<Vec<_>>>()?;
    let micro_average = micro_average_roc(scores, labels)?;
    report.roc = Some(RocReport {
        per_class,
        micro_average_auc: micro_average.auc,
        micro_average,
    });
    Ok(report)
}

/// Index of the largest value; the first one wins ties.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Class probabilities for every sample of `set`, in order, without dropout.
pub fn predict_probabilities(model: &EWasteNet, set: &SampleSet, batch_size: usize) -> Result<Vec<Vec<f32>>> {
    if batch_size == 0 {
        return Err(Error::arg("batch_size must be positive"));
    }
    let mut out = Vec::with_capacity(set.len());
    for chunk in set.images.chunks(batch_size) {
        let batch = crate::data::normalize(&chunk.iter().collect::<Vec<_>>())?;
        let probs = model.forward(&batch, &mut Mode::Eval)?;
        out.extend(probs.data().chunks(model.config.fusion.num_classes).map(<[f32]>::to_vec));
    }
    Ok(out)
}

/// The three report artifacts as text.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RenderedReport {
    pub report_json: String,
    pub confusion_csv: String,
    pub roc_csv: String,
}

pub fn render_report(report: &MetricsReport) -> Result<RenderedReport> {
    let mut roc_csv = String::from("class,threshold,fpr,tpr\n");
    if let Some(roc) = &report.roc {
        for curve in roc.per_class.iter().chain([&roc.micro_average]) {
            for p in &curve.points {
                let _ = writeln!(roc_csv, "{},{},{},{}", csv_field(&curve.label), p.threshold, p.fpr, p.tpr);
            }
        }
    }
    Ok(RenderedReport {
        report_json: serde_json::to_string_pretty(report)? + "\n",
        confusion_csv: report.confusion.to_csv(),
        roc_csv,
    })
}

/// Writes `report.json`, `confusion.csv` and `roc.csv` into `dir`.
pub fn write_report(dir: &Path, report: &MetricsReport) -> Result<RenderedReport> {
    let r = render_report(report)?;
    write_atomic(&dir.join("report.json"), r.report_json.as_bytes())?;
    write_atomic(&dir.join("confusion.csv"), r.confusion_csv.as_bytes())?;
    write_atomic(&dir.join("roc.csv"), r.roc_csv.as_bytes())?;
    Ok(r)
}

/// Human-readable summary of the headline metrics.
pub fn render_summary(report: &MetricsReport) -> String {
    let mut out = format!(
        "samples   {}\naccuracy  {:.4}\nprecision {:.4} macro, {:.4} weighted\nrecall    {:.4} macro, {:.4} weighted\nf1        {:.4} macro, {:.4} weighted\nmcc       {:.4}\n",
        report.samples,
        report.accuracy,
        report.macro_precision,
        report.weighted_precision,
        report.macro_recall,
        report.weighted_recall,
        report.macro_f1,
        report.weighted_f1,
        report.mcc,
    );
    if let Some(roc) = &report.roc {
        let _ = writeln!(out, "micro AUC {:.4}", roc.micro_average_auc);
    }
    out
}
