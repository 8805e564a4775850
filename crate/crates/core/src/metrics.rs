//! Error summaries for estimate streams.

use serde::Serialize;

use crate::error::{Error, Result};

/// Estimated vs. true state at one instant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EstimateRecord {
    pub t: f64,
    pub xhat: [f64; 4],
    pub x: Option<[f64; 4]>,
    /// Set when the sample preceding this record was missing from the stream.
    pub gap: bool,
}

impl EstimateRecord {
    pub fn error(&self) -> Option<[f64; 4]> {
        self.x.map(|x| std::array::from_fn(|i| self.xhat[i] - x[i]))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsWindow {
    pub start: f64,
    pub end: f64,
    pub threshold: f64,
}

impl Default for MetricsWindow {
    fn default() -> Self {
        Self {
            start: 0.0,
            end: f64::INFINITY,
            threshold: 1e-3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StateMetrics {
    pub rmse: f64,
    /// First time after which the absolute error stays below the threshold;
    /// `None` when it never settles.
    pub settling_time: Option<f64>,
    pub max_after_settling: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ErrorSummary {
    pub threshold: f64,
    pub states: [StateMetrics; 4],
}

impl ErrorSummary {
    /// Latest settling time over all states.
    pub fn settling_time(&self) -> Option<f64> {
        self.states
            .iter()
            .map(|s| s.settling_time)
            .try_fold(0.0f64, |m, s| s.map(|s| m.max(s)))
    }
}

/// Per-state RMSE over the window, settling time measured from the first
/// record, and the largest error after settling.
pub fn error_metrics(records: &[EstimateRecord], window: &MetricsWindow) -> Result<ErrorSummary> {
    let with_truth: Vec<(f64, [f64; 4])> = records
        .iter()
        .filter_map(|r| r.error().map(|e| (r.t, e)))
        .collect();
    if with_truth.is_empty() {
        return Err(Error::EmptyStream);
    }
    let t0 = with_truth[0].0;
    let states = std::array::from_fn(|i| {
        let in_window: Vec<f64> = with_truth
            .iter()
            .filter(|(t, _)| *t >= window.start && *t <= window.end)
            .map(|(_, e)| e[i])
            .collect();
        let rmse = if in_window.is_empty() {
            f64::NAN
        } else {
            (in_window.iter().map(|e| e * e).sum::<f64>() / in_window.len() as f64).sqrt()
        };
        let last_bad = with_truth
            .iter()
            .rposition(|(_, e)| !(e[i].abs() < window.threshold));
        let settle_idx = match last_bad {
            None => Some(0),
            Some(k) if k + 1 < with_truth.len() => Some(k + 1),
            Some(_) => None,
        };
        let settling_time = settle_idx.map(|k| with_truth[k].0 - t0);
        let max_after_settling = settle_idx.map(|k| {
            with_truth[k..]
                .iter()
                .fold(0.0f64, |m, (_, e)| m.max(e[i].abs()))
        });
        StateMetrics {
            rmse,
            settling_time,
            max_after_settling,
        }
    });
    Ok(ErrorSummary {
        threshold: window.threshold,
        states,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogLinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

/// Least-squares fit of `ln e = intercept + slope t`. Nonpositive errors are
/// skipped; `None` with fewer than three usable points.
pub fn log_linear_fit(ts: &[f64], es: &[f64]) -> Option<LogLinearFit> {
    let pts: Vec<(f64, f64)> = ts
        .iter()
        .zip(es)
        .filter(|(_, e)| **e > 0.0 && e.is_finite())
        .map(|(t, e)| (*t, e.ln()))
        .collect();
    if pts.len() < 3 {
        return None;
    }
    let n = pts.len() as f64;
    let mt = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let stt: f64 = pts.iter().map(|p| (p.0 - mt).powi(2)).sum();
    let sty: f64 = pts.iter().map(|p| (p.0 - mt) * (p.1 - my)).sum();
    let syy: f64 = pts.iter().map(|p| (p.1 - my).powi(2)).sum();
    if stt == 0.0 {
        return None;
    }
    let slope = sty / stt;
    let ss_res: f64 = pts
        .iter()
        .map(|p| (p.1 - my - slope * (p.0 - mt)).powi(2))
        .sum();
    Some(LogLinearFit {
        slope,
        intercept: my - slope * mt,
        r2: if syy > 0.0 { 1.0 - ss_res / syy } else { 1.0 },
    })
}
