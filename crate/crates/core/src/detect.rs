//! Thresholds, verdicts and classification metrics.
//!
//! A device's threshold is `mean + k·std` of its reconstruction losses on
//! normal validation windows (population std). A window is anomalous when
//! its loss is strictly above the threshold.

use std::fmt;
use std::io;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attacks::Truth;
use crate::logfmt::Timestamp;
use crate::netmodel::NodeId;

pub const DEFAULT_KS: [f64; 4] = [1.0, 2.0, 3.0, 4.0];

#[derive(Debug, Error)]
pub enum DetectError {
    #[error("no validation losses to calibrate on")]
    EmptyValidation,
    #[error("loss {0} is negative or not finite")]
    BadLoss(f64),
    #[error("{verdicts} verdicts but {truths} truth labels")]
    Misaligned { verdicts: usize, truths: usize },
    #[error("no k values to sweep")]
    EmptyKs,
    #[error("report csv: {0}")]
    Csv(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl From<csv::Error> for DetectError {
    fn from(e: csv::Error) -> Self {
        DetectError::Csv(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossStats {
    pub mean: f64,
    pub std: f64,
}

impl LossStats {
    pub fn from_losses(losses: &[f64]) -> Result<LossStats, DetectError> {
        if losses.is_empty() {
            return Err(DetectError::EmptyValidation);
        }
        if let Some(bad) = losses.iter().find(|l| !(l.is_finite() && **l >= 0.0)) {
            return Err(DetectError::BadLoss(*bad));
        }
        let n = losses.len() as f64;
        let mean = losses.iter().sum::<f64>() / n;
        let std = (losses.iter().map(|l| (l - mean) * (l - mean)).sum::<f64>() / n).sqrt();
        Ok(LossStats { mean, std })
    }

    /// Recovers mean and std from two thresholds at different k.
    pub fn from_two_thresholds((k1, t1): (f64, f64), (k2, t2): (f64, f64)) -> LossStats {
        let std = (t2 - t1) / (k2 - k1);
        LossStats { mean: t1 - k1 * std, std }
    }

    pub fn threshold(&self, device: NodeId, k: f64) -> Threshold {
        Threshold { device, mean: self.mean, std: self.std, k, value: self.mean + k * self.std }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Threshold {
    pub device: NodeId,
    pub mean: f64,
    pub std: f64,
    pub k: f64,
    pub value: f64,
}

pub fn calibrate_threshold(device: NodeId, validation_losses: &[f64], k: f64) -> Result<Threshold, DetectError> {
    Ok(LossStats::from_losses(validation_losses)?.threshold(device, k))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Normal,
    Anomaly,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::Normal => "normal",
            Verdict::Anomaly => "anomaly",
        })
    }
}

pub fn classify_window(loss: f64, t: &Threshold) -> Verdict {
    if loss > t.value {
        Verdict::Anomaly
    } else {
        Verdict::Normal
    }
}

/// Window-wise OR: anomalous if any device flags it.
pub fn fuse_any(per_device: &[Vec<Verdict>]) -> Vec<Verdict> {
    let n = per_device.iter().map(Vec::len).max().unwrap_or(0);
    (0..n)
        .map(|i| {
            if per_device.iter().any(|v| v.get(i) == Some(&Verdict::Anomaly)) {
                Verdict::Anomaly
            } else {
                Verdict::Normal
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub tn: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl Confusion {
    pub fn total(&self) -> usize {
        self.tp + self.tn + self.fp + self.fn_
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Share of normal windows flagged.
    pub false_positive_rate: f64,
    /// Some ratio had a zero denominator and was reported as 0.
    pub degenerate: bool,
}

pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    }
}

fn ratio(num: usize, den: usize, degenerate: &mut bool) -> f64 {
    if den == 0 {
        *degenerate = true;
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl Metrics {
    pub fn from_confusion(c: &Confusion) -> Metrics {
        let mut degenerate = false;
        let accuracy = ratio(c.tp + c.tn, c.total(), &mut degenerate);
        let precision = ratio(c.tp, c.tp + c.fp, &mut degenerate);
        let recall = ratio(c.tp, c.tp + c.fn_, &mut degenerate);
        let false_positive_rate = ratio(c.fp, c.fp + c.tn, &mut degenerate);
        Metrics { accuracy, precision, recall, f1: f1_score(precision, recall), false_positive_rate, degenerate }
    }
}

pub fn confusion(verdicts: &[Verdict], truths: &[Truth]) -> Result<Confusion, DetectError> {
    if verdicts.len() != truths.len() {
        return Err(DetectError::Misaligned { verdicts: verdicts.len(), truths: truths.len() });
    }
    let mut c = Confusion::default();
    for (v, t) in verdicts.iter().zip(truths) {
        match (v, t) {
            (Verdict::Anomaly, Truth::Attack) => c.tp += 1,
            (Verdict::Normal, Truth::Normal) => c.tn += 1,
            (Verdict::Anomaly, Truth::Normal) => c.fp += 1,
            (Verdict::Normal, Truth::Attack) => c.fn_ += 1,
        }
    }
    Ok(c)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowVerdict {
    pub window_start: Timestamp,
    pub loss: f64,
    pub verdict: Verdict,
    pub truth: Truth,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub device: NodeId,
    pub k: f64,
    pub threshold: Threshold,
    pub windows: Vec<WindowVerdict>,
    pub confusion: Confusion,
    pub metrics: Metrics,
}

impl DetectionReport {
    pub fn verdicts(&self) -> Vec<Verdict> {
        self.windows.iter().map(|w| w.verdict).collect()
    }
}

/// Verdicts and metrics for one device at one threshold.
pub fn score(
    threshold: &Threshold,
    window_starts: &[Timestamp],
    losses: &[f64],
    truths: &[Truth],
) -> Result<DetectionReport, DetectError> {
    if losses.len() != truths.len() || window_starts.len() != losses.len() {
        return Err(DetectError::Misaligned { verdicts: losses.len(), truths: truths.len() });
    }
    let windows: Vec<WindowVerdict> = window_starts
        .iter()
        .zip(losses)
        .zip(truths)
        .map(|((w, l), t)| WindowVerdict {
            window_start: *w,
            loss: *l,
            verdict: classify_window(*l, threshold),
            truth: *t,
        })
        .collect();
    let verdicts: Vec<Verdict> = windows.iter().map(|w| w.verdict).collect();
    let confusion = confusion(&verdicts, truths)?;
    Ok(DetectionReport {
        device: threshold.device,
        k: threshold.k,
        threshold: *threshold,
        windows,
        metrics: Metrics::from_confusion(&confusion),
        confusion,
    })
}

/// One report per k, in the order given.
pub fn sweep_k(
    device: NodeId,
    stats: &LossStats,
    window_starts: &[Timestamp],
    losses: &[f64],
    truths: &[Truth],
    ks: &[f64],
) -> Result<Vec<DetectionReport>, DetectError> {
    if ks.is_empty() {
        return Err(DetectError::EmptyKs);
    }
    ks.iter().map(|k| score(&stats.threshold(device, *k), window_starts, losses, truths)).collect()
}

/// k with the highest F1; ties go to the larger k.
pub fn select_optimal_k(scores: &[(f64, f64)]) -> Option<f64> {
    scores
        .iter()
        .copied()
        .reduce(|best, cur| if cur.1 > best.1 || (cur.1 == best.1 && cur.0 > best.0) { cur } else { best })
        .map(|(k, _)| k)
}

pub fn optimal_report(reports: &[DetectionReport]) -> Option<&DetectionReport> {
    let scores: Vec<(f64, f64)> = reports.iter().map(|r| (r.k, r.metrics.f1)).collect();
    let k = select_optimal_k(&scores)?;
    reports.iter().find(|r| r.k == k)
}

/// Writes `device,k,acc,prec,rec,f1` rows.
pub fn write_reports_csv<W: io::Write>(out: W, reports: &[DetectionReport]) -> Result<(), DetectError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["device", "k", "acc", "prec", "rec", "f1"])?;
    for r in reports {
        let m = &r.metrics;
        w.write_record([
            r.device.to_string(),
            format!("{}", r.k),
            format!("{:.4}", m.accuracy),
            format!("{:.4}", m.precision),
            format!("{:.4}", m.recall),
            format!("{:.4}", m.f1),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `window_start,loss,truth` rows for one device.
pub fn write_loss_series_csv<W: io::Write>(out: W, windows: &[WindowVerdict]) -> Result<(), DetectError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["window_start", "loss", "truth"])?;
    for win in windows {
        w.write_record([win.window_start.to_string(), format!("{}", win.loss), win.truth.to_string()])?;
    }
    w.flush()?;
    Ok(())
}
