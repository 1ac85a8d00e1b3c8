use std::io::Write;

use serde::Serialize;

use crate::error::Result;

/// Measurement of one layer on one microbatch.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerStat {
    pub layer: usize,
    pub batch: usize,
    pub samples: usize,
    pub loss: Option<f64>,
    /// Train-mode predictions matching the label (early exit or classifier).
    pub correct: usize,
    pub secs: f64,
    pub peak_bytes: u64,
}

/// Per-layer totals over one epoch.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LayerTotals {
    pub samples: usize,
    pub loss_sum: f64,
    pub has_loss: bool,
    pub correct: usize,
    pub secs: f64,
    pub peak_bytes: u64,
}

impl LayerTotals {
    pub fn mean_loss(&self) -> Option<f64> {
        (self.has_loss && self.samples > 0).then(|| self.loss_sum / self.samples as f64)
    }

    /// Only layers with a loss make predictions of their own.
    pub fn train_err(&self) -> Option<f64> {
        (self.has_loss && self.samples > 0).then(|| 1.0 - self.correct as f64 / self.samples as f64)
    }

    pub fn time_per_sample(&self) -> f64 {
        if self.samples == 0 {
            0.0
        } else {
            self.secs / self.samples as f64
        }
    }
}

/// Aggregates stats that may arrive out of order from several workers.
///
/// Totals are formed in `(layer, batch)` order, so the floating-point sums
/// do not depend on arrival order.
#[derive(Debug, Clone, Default)]
pub struct EpochStats {
    pub(crate) stats: Vec<LayerStat>,
    /// Whole-step measurement: wall time of the epoch and the largest
    /// single-step peak.
    pub step_secs: f64,
    pub step_peak: u64,
    pub samples: usize,
}

impl EpochStats {
    pub fn push(&mut self, s: LayerStat) {
        self.stats.push(s);
    }

    pub fn extend(&mut self, s: impl IntoIterator<Item = LayerStat>) {
        self.stats.extend(s);
    }

    pub fn totals(&self) -> Vec<LayerTotals> {
        let mut sorted: Vec<&LayerStat> = self.stats.iter().collect();
        sorted.sort_by_key(|s| (s.layer, s.batch));
        let layers = sorted.last().map_or(0, |s| s.layer + 1);
        let mut out = vec![LayerTotals::default(); layers];
        for s in sorted {
            let t = &mut out[s.layer];
            t.samples += s.samples;
            if let Some(l) = s.loss {
                t.loss_sum += l * s.samples as f64;
                t.has_loss = true;
            }
            t.correct += s.correct;
            t.secs += s.secs;
            t.peak_bytes = t.peak_bytes.max(s.peak_bytes);
        }
        out
    }
}

/// One line of the metrics CSV.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricRow {
    pub mode: String,
    pub epoch: usize,
    /// Block index, `classifier`, or `step` for whole-network figures.
    pub layer: String,
    pub loss: Option<f64>,
    pub time_per_sample_s: Option<f64>,
    pub peak_bytes: u64,
    pub train_err: Option<f64>,
    pub test_err: Option<f64>,
}

/// Writes rows with a header line; `None` fields are left empty.
pub fn write_csv<W: Write>(out: W, rows: &[MetricRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)
            .map_err(|e| std::io::Error::other(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// JSON summary of a run.
#[derive(Debug, Clone, Serialize)]
pub struct Summary {
    pub mode: String,
    pub config: serde_json::Value,
    pub epochs: usize,
    pub train_err: Option<f64>,
    pub test_err: f64,
    pub classifier_test_err: Option<f64>,
    pub output_target_test_err: Option<f64>,
    pub layer_test_err: Vec<f64>,
    pub params: usize,
    pub checkpoint: Option<String>,
    pub checkpoint_sha256: Option<String>,
    pub wall_s: Option<f64>,
}
