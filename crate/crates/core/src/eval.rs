//! Prediction decoding, per-slice segmentation metrics, the pooled confusion
//! matrix with its "others" category, paired t-tests, and CSV report output.
//!
//! Metrics follow the partial-annotation convention: each evaluated slice
//! carries exactly one chosen class, so true positives and false negatives
//! come from its strongly labeled pixels while false positives come from weak
//! pixels the model nevertheless assigned to the chosen class. Weak pixels
//! predicted as some other class have unknown truth and are excluded.

use crate::dataset::PartialAnnotation;
use crate::error::{Error, Result};
use crate::loss::{ClassId, LossMode, PixelLabel, CLASS_NAMES, NUM_CLASSES};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::cmp::Ordering;
use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

/// Truth column for weak pixels predicted as their forbidden class.
pub const OTHERS_NAME: &str = "OTHERS";

/// Converts a (1, H, W, 5) probability (or logit) map to per-pixel classes.
///
/// Each pixel takes the class of its largest channel value; exact ties go to
/// the lowest class index. The result is H·W entries in row-major order.
pub fn decode_argmax(probabilities: &Tensor) -> Result<Vec<ClassId>> {
    let shape = probabilities.shape();
    if shape.len() != 4 || shape[0] != 1 || shape[3] != NUM_CLASSES {
        return Err(Error::dimension(
            "channel",
            format!("decode_argmax needs shape (1, H, W, {NUM_CLASSES}), got {shape:?}"),
        ));
    }
    let pixels = shape[1] * shape[2];
    let data = probabilities.data();
    let mut decoded = Vec::with_capacity(pixels);
    for p in 0..pixels {
        let probs = &data[p * NUM_CLASSES..(p + 1) * NUM_CLASSES];
        let mut best = 0usize;
        for (c, &value) in probs.iter().enumerate().skip(1) {
            if value > probs[best] {
                best = c;
            }
        }
        decoded.push(ClassId::from_index(best)?);
    }
    Ok(decoded)
}

/// Recall, precision, and dice for one evaluated slice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceMetrics {
    pub case_id: String,
    pub slice_index: usize,
    pub chosen: ClassId,
    pub recall: f64,
    pub precision: f64,
    pub dice: f64,
}

/// Scores a decoded prediction against a slice's partial annotation.
///
/// With chosen class c, counting in-lung pixels only: TP are strong pixels
/// predicted c, FN are strong pixels predicted otherwise, and FP are weak
/// pixels predicted c. A zero denominator yields 0 for that metric, except
/// that TP = FP = FN = 0 yields 1 for all three.
pub fn slice_metrics(
    pred: &[ClassId],
    annotation: &PartialAnnotation,
    case_id: &str,
) -> Result<SliceMetrics> {
    if pred.len() != annotation.labels.len() {
        return Err(Error::dimension(
            "pixel",
            format!(
                "prediction has {} pixels, annotation has {}",
                pred.len(),
                annotation.labels.len()
            ),
        ));
    }
    let chosen = annotation.chosen_class;
    let (mut tp, mut fn_count, mut fp) = (0u64, 0u64, 0u64);
    for (label, &predicted) in annotation.labels.iter().zip(pred) {
        match *label {
            PixelLabel::Strong(c) if c == chosen => {
                if predicted == chosen {
                    tp += 1;
                } else {
                    fn_count += 1;
                }
            }
            PixelLabel::Weak(c) if c == chosen => {
                if predicted == chosen {
                    fp += 1;
                }
            }
            PixelLabel::Ignore => {}
            other => {
                return Err(Error::Contract(format!(
                    "annotation for class {} contains unexpected label {other:?}",
                    chosen.name()
                )));
            }
        }
    }
    let (recall, precision, dice) = if tp == 0 && fp == 0 && fn_count == 0 {
        (1.0, 1.0, 1.0)
    } else {
        let recall = if tp + fn_count == 0 { 0.0 } else { tp as f64 / (tp + fn_count) as f64 };
        let precision = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
        let dice = 2.0 * tp as f64 / (2 * tp + fp + fn_count) as f64;
        (recall, precision, dice)
    };
    Ok(SliceMetrics {
        case_id: case_id.to_string(),
        slice_index: annotation.slice_index,
        chosen,
        recall,
        precision,
        dice,
    })
}

/// Pooled prediction-vs-truth counts over a test set.
///
/// Rows are predicted classes; columns are the five true classes plus an
/// "others" column holding weak pixels predicted as their forbidden class.
/// Strong pixels always count toward their true class; weak pixels predicted
/// as any other class are excluded because their truth is unknown.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    counts: [[u64; NUM_CLASSES + 1]; NUM_CLASSES],
}

impl ConfusionMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    /// Accumulates one decoded slice against its annotation.
    pub fn record(&mut self, pred: &[ClassId], annotation: &PartialAnnotation) -> Result<()> {
        if pred.len() != annotation.labels.len() {
            return Err(Error::dimension(
                "pixel",
                format!(
                    "prediction has {} pixels, annotation has {}",
                    pred.len(),
                    annotation.labels.len()
                ),
            ));
        }
        for (label, &predicted) in annotation.labels.iter().zip(pred) {
            match *label {
                PixelLabel::Strong(truth) => {
                    self.counts[predicted.index()][truth.index()] += 1;
                }
                PixelLabel::Weak(forbidden) if predicted == forbidden => {
                    self.counts[predicted.index()][NUM_CLASSES] += 1;
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Adds another matrix's counts into this one.
    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for (row, other_row) in self.counts.iter_mut().zip(&other.counts) {
            for (cell, &value) in row.iter_mut().zip(other_row) {
                *cell += value;
            }
        }
    }

    /// Raw counts, indexed [predicted][truth], with `OTHERS` last.
    pub fn counts(&self) -> &[[u64; NUM_CLASSES + 1]; NUM_CLASSES] {
        &self.counts
    }

    /// Rows normalized to sum to 1; an empty row stays all zero.
    ///
    /// The diagonal entry of row c is the fraction of counted c-predictions
    /// that were truly c, the class's precision over the counted pixels.
    pub fn normalized(&self) -> [[f64; NUM_CLASSES + 1]; NUM_CLASSES] {
        let mut out = [[0.0; NUM_CLASSES + 1]; NUM_CLASSES];
        for (row_out, row) in out.iter_mut().zip(&self.counts) {
            let total: u64 = row.iter().sum();
            if total > 0 {
                for (cell, &count) in row_out.iter_mut().zip(row) {
                    *cell = count as f64 / total as f64;
                }
            }
        }
        out
    }
}

/// Builds a confusion matrix from decoded slices and their annotations.
pub fn confusion_matrix<'a>(
    slices: impl IntoIterator<Item = (&'a [ClassId], &'a PartialAnnotation)>,
) -> Result<ConfusionMatrix> {
    let mut matrix = ConfusionMatrix::new();
    for (pred, annotation) in slices {
        matrix.record(pred, annotation)?;
    }
    Ok(matrix)
}

/// A two-sided paired t-test outcome.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TTestResult {
    pub t: f64,
    pub df: usize,
    pub p: f64,
}

/// Paired t-test on two equally long series, paired by position.
///
/// With d = a − b: t = mean(d) / (sd(d) / √n) on n − 1 degrees of freedom,
/// using the sample standard deviation. When sd(d) is zero the test
/// degenerates: zero mean gives t = 0, p = 1; a nonzero mean gives an
/// infinite t and p = 0.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<TTestResult> {
    if a.len() != b.len() {
        return Err(Error::Contract(format!(
            "paired series differ in length: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let n = a.len();
    if n < 2 {
        return Err(Error::Contract(format!("paired t-test needs at least 2 pairs, got {n}")));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = d.iter().sum::<f64>() / n as f64;
    let variance = d.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n as f64 - 1.0);
    let sd = variance.sqrt();
    let df = n - 1;
    if sd == 0.0 {
        if mean == 0.0 {
            return Ok(TTestResult { t: 0.0, df, p: 1.0 });
        }
        return Ok(TTestResult { t: mean.signum() * f64::INFINITY, df, p: 0.0 });
    }
    let t = mean / (sd / (n as f64).sqrt());
    let p = student_two_sided_p(t, df);
    Ok(TTestResult { t, df, p })
}

/// Two-sided tail probability of Student's t with `df` degrees of freedom.
fn student_two_sided_p(t: f64, df: usize) -> f64 {
    let v = df as f64;
    reg_inc_beta(v / 2.0, 0.5, v / (v + t * t))
}

/// Natural log of the gamma function, Lanczos approximation (g = 7).
fn ln_gamma(x: f64) -> f64 {
    const COEFFS: [f64; 9] = [
        0.999_999_999_999_809_93,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_13,
        -176.615_029_162_140_59,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_571_6e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        return (PI / (PI * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = COEFFS[0];
    for (i, &c) in COEFFS.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    let t = x + 7.5;
    0.5 * (2.0 * PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

/// Regularized incomplete beta function I_x(a, b).
///
/// Continued-fraction evaluation (modified Lentz), iterated to an absolute
/// tolerance of 1e-8.
fn reg_inc_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front =
        ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    let front = ln_front.exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_continued_fraction(a, b, x) / a
    } else {
        1.0 - front * beta_continued_fraction(b, a, 1.0 - x) / b
    }
}

fn beta_continued_fraction(a: f64, b: f64, x: f64) -> f64 {
    const MAX_ITER: usize = 300;
    const TOL: f64 = 1e-8;
    const TINY: f64 = 1e-300;
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=MAX_ITER {
        let m = m as f64;
        let m2 = 2.0 * m;
        let numerator = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + numerator * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + numerator / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let numerator = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + numerator * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + numerator / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let delta = d * c;
        h *= delta;
        if (delta - 1.0).abs() < TOL {
            break;
        }
    }
    h
}

/// Stable report label for a training method.
pub fn method_label(mode: &LossMode) -> String {
    match mode {
        LossMode::SupervisedOnly => "supervised_only".to_string(),
        LossMode::Proposed { lambda } => format!("proposed_lambda_{}", format_float(*lambda)),
        LossMode::SemiSupervised => "semi_supervised".to_string(),
    }
}

/// Canonical report ordering: supervised-only first, then the proposed loss
/// by ascending weight, semi-supervised last.
pub fn compare_methods(a: &LossMode, b: &LossMode) -> Ordering {
    fn rank(mode: &LossMode) -> (u8, f64) {
        match mode {
            LossMode::SupervisedOnly => (0, 0.0),
            LossMode::Proposed { lambda } => (1, *lambda),
            LossMode::SemiSupervised => (2, 0.0),
        }
    }
    let (ra, la) = rank(a);
    let (rb, lb) = rank(b);
    ra.cmp(&rb).then(la.total_cmp(&lb))
}

/// Everything one method produced over the evaluated slices.
#[derive(Debug, Clone)]
pub struct MethodResults {
    pub mode: LossMode,
    pub metrics: Vec<SliceMetrics>,
    pub confusion: ConfusionMatrix,
}

/// One row of summary.csv.
#[derive(Debug, Clone, PartialEq)]
pub struct MethodSummary {
    pub method: String,
    pub recall_mean: f64,
    pub recall_sd: f64,
    pub precision_mean: f64,
    pub precision_sd: f64,
    pub dice_mean: f64,
    pub dice_sd: f64,
}

/// One row of ttests.csv.
#[derive(Debug, Clone, PartialEq)]
pub struct TTestRow {
    pub method: String,
    pub baseline: String,
    pub result: TTestResult,
}

/// Aggregated report contents, in file order.
#[derive(Debug, Clone)]
pub struct MetricsReport {
    pub summaries: Vec<MethodSummary>,
    pub ttests: Vec<TTestRow>,
}

/// Writes summary.csv, per_slice.csv, confusion.csv, and ttests.csv.
///
/// All methods must cover the same slice set. Methods are emitted in
/// canonical order, slices in (case, slice) order, floats with six
/// significant digits. Dice t-test rows compare each method against the
/// proposed loss at weight 0.1 when that method is present, pairing slices
/// by identity; positive t means the row's method scored higher.
pub fn aggregate_report(methods: &[MethodResults], dir: &Path) -> Result<MetricsReport> {
    if methods.is_empty() {
        return Err(Error::Contract("aggregate_report needs at least one method".to_string()));
    }
    let mut ordered: Vec<&MethodResults> = methods.iter().collect();
    ordered.sort_by(|a, b| compare_methods(&a.mode, &b.mode));
    let labels: Vec<String> = ordered.iter().map(|m| method_label(&m.mode)).collect();
    for pair in labels.windows(2) {
        if pair[0] == pair[1] {
            return Err(Error::Contract(format!("duplicate method {}", pair[0])));
        }
    }

    let mut sorted_metrics: Vec<Vec<SliceMetrics>> = Vec::with_capacity(ordered.len());
    for method in &ordered {
        if method.metrics.is_empty() {
            return Err(Error::Contract(format!(
                "method {} has no evaluated slices",
                method_label(&method.mode)
            )));
        }
        let mut metrics = method.metrics.clone();
        metrics.sort_by(|a, b| {
            (a.case_id.as_str(), a.slice_index).cmp(&(b.case_id.as_str(), b.slice_index))
        });
        for pair in metrics.windows(2) {
            if pair[0].case_id == pair[1].case_id && pair[0].slice_index == pair[1].slice_index {
                return Err(Error::Contract(format!(
                    "method {} scored slice {}/{} twice",
                    method_label(&method.mode),
                    pair[0].case_id,
                    pair[0].slice_index
                )));
            }
        }
        sorted_metrics.push(metrics);
    }
    let slice_keys: Vec<(&str, usize)> =
        sorted_metrics[0].iter().map(|m| (m.case_id.as_str(), m.slice_index)).collect();
    for (label, metrics) in labels.iter().zip(&sorted_metrics).skip(1) {
        let keys: Vec<(&str, usize)> =
            metrics.iter().map(|m| (m.case_id.as_str(), m.slice_index)).collect();
        if keys != slice_keys {
            return Err(Error::Contract(format!(
                "method {label} was evaluated on a different slice set"
            )));
        }
    }

    let summaries: Vec<MethodSummary> = labels
        .iter()
        .zip(&sorted_metrics)
        .map(|(label, metrics)| {
            let (recall_mean, recall_sd) = mean_sd(metrics.iter().map(|m| m.recall));
            let (precision_mean, precision_sd) = mean_sd(metrics.iter().map(|m| m.precision));
            let (dice_mean, dice_sd) = mean_sd(metrics.iter().map(|m| m.dice));
            MethodSummary {
                method: label.clone(),
                recall_mean,
                recall_sd,
                precision_mean,
                precision_sd,
                dice_mean,
                dice_sd,
            }
        })
        .collect();

    let baseline_mode = LossMode::Proposed { lambda: 0.1 };
    let baseline_label = method_label(&baseline_mode);
    let baseline_index = ordered.iter().position(|m| method_label(&m.mode) == baseline_label);
    let mut ttests = Vec::new();
    if let Some(base) = baseline_index {
        let baseline_dice: Vec<f64> = sorted_metrics[base].iter().map(|m| m.dice).collect();
        for (i, label) in labels.iter().enumerate() {
            if i == base {
                continue;
            }
            let dice: Vec<f64> = sorted_metrics[i].iter().map(|m| m.dice).collect();
            let result = paired_t_test(&dice, &baseline_dice)?;
            ttests.push(TTestRow {
                method: label.clone(),
                baseline: baseline_label.clone(),
                result,
            });
        }
    }

    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let write = |name: &str, contents: String| -> Result<()> {
        std::fs::write(dir.join(name), contents).map_err(|e| Error::io(name, e))
    };
    write("summary.csv", summary_csv(&summaries))?;
    write("per_slice.csv", per_slice_csv(&labels, &sorted_metrics))?;
    write("confusion.csv", confusion_csv(&labels, &ordered))?;
    write("ttests.csv", ttests_csv(&ttests))?;
    Ok(MetricsReport { summaries, ttests })
}

fn mean_sd(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let values: Vec<f64> = values.collect();
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let variance = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, variance.sqrt())
}

fn summary_csv(summaries: &[MethodSummary]) -> String {
    let mut out =
        String::from("method,recall_mean,recall_sd,precision_mean,precision_sd,dice_mean,dice_sd\n");
    for s in summaries {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            s.method,
            format_float(s.recall_mean),
            format_float(s.recall_sd),
            format_float(s.precision_mean),
            format_float(s.precision_sd),
            format_float(s.dice_mean),
            format_float(s.dice_sd),
        );
    }
    out
}

fn per_slice_csv(labels: &[String], metrics: &[Vec<SliceMetrics>]) -> String {
    let mut out = String::from("method,case_id,slice_index,class,recall,precision,dice\n");
    for (label, slices) in labels.iter().zip(metrics) {
        for m in slices {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                label,
                m.case_id,
                m.slice_index,
                m.chosen.name(),
                format_float(m.recall),
                format_float(m.precision),
                format_float(m.dice),
            );
        }
    }
    out
}

fn confusion_csv(labels: &[String], methods: &[&MethodResults]) -> String {
    let mut out = format!("method,predicted,{},{OTHERS_NAME}\n", CLASS_NAMES.join(","));
    for (label, method) in labels.iter().zip(methods) {
        let rows = method.confusion.normalized();
        for (c, row) in rows.iter().enumerate() {
            let cells: Vec<String> = row.iter().map(|&v| format_float(v)).collect();
            let _ = writeln!(out, "{},{},{}", label, CLASS_NAMES[c], cells.join(","));
        }
    }
    out
}

fn ttests_csv(rows: &[TTestRow]) -> String {
    let mut out = String::from("method,baseline,t,df,p\n");
    for row in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            row.method,
            row.baseline,
            format_float(row.result.t),
            row.result.df,
            format_float(row.result.p),
        );
    }
    out
}

/// Formats a number with six significant digits, trimming trailing zeros.
///
/// Magnitudes outside [1e-4, 1e6) switch to scientific notation, mirroring
/// printf's %g. The output is locale-independent and stable across runs.
pub fn format_float(x: f64) -> String {
    if x.is_nan() {
        return "nan".to_string();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".to_string() } else { "-inf".to_string() };
    }
    if x == 0.0 {
        return "0".to_string();
    }
    let sci = format!("{x:.5e}");
    let (mantissa, exponent) = sci.split_once('e').expect("float scientific form");
    let exponent: i32 = exponent.parse().expect("float exponent");
    if (-4..6).contains(&exponent) {
        let decimals = (5 - exponent).max(0) as usize;
        trim_trailing_zeros(&format!("{x:.decimals$}"))
    } else {
        format!("{}e{}", trim_trailing_zeros(mantissa), exponent)
    }
}

fn trim_trailing_zeros(s: &str) -> String {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s.to_string()
    }
}
