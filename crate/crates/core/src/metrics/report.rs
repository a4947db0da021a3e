use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::MetricReport;

pub const CSV_HEADER: &str = "id,abs_rel,sq_rel,rmse,rmse_log,log10,delta1,delta2,delta3,n_pixels";

/// Aggregate evaluation result written next to the per-sample CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub metrics: MetricReport,
    pub config_hash: String,
    pub profile: String,
    pub aggregation: String,
    pub n_samples: usize,
    /// Samples with no valid pixels, left out of the aggregate.
    pub excluded: Vec<String>,
    /// Mean relative improvement over the supplied baseline, as a fraction.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mri: Option<f64>,
}

pub fn csv_row(id: &str, r: &MetricReport) -> String {
    format!(
        "{id},{},{},{},{},{},{},{},{},{}",
        r.abs_rel, r.sq_rel, r.rmse, r.rmse_log, r.log10, r.delta1, r.delta2, r.delta3, r.n_pixels
    )
}

pub fn write_per_sample_csv(path: &Path, rows: &[(String, MetricReport)]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for (id, r) in rows {
        out.push_str(&csv_row(id, r));
        out.push('\n');
    }
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

pub fn write_summary(path: &Path, summary: &EvalSummary) -> Result<()> {
    let text = serde_json::to_string_pretty(summary)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Read a baseline: either a full summary or a bare metric report.
pub fn read_baseline(path: &Path) -> Result<MetricReport> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    if let Ok(s) = serde_json::from_str::<EvalSummary>(&text) {
        return Ok(s.metrics);
    }
    #[derive(Deserialize)]
    struct Partial {
        delta1: f64,
        abs_rel: f64,
        rmse: f64,
        #[serde(default)]
        sq_rel: f64,
        #[serde(default)]
        rmse_log: f64,
        #[serde(default)]
        log10: f64,
        #[serde(default)]
        delta2: f64,
        #[serde(default)]
        delta3: f64,
        #[serde(default)]
        n_pixels: usize,
    }
    let p: Partial = serde_json::from_str(&text)
        .map_err(|e| Error::Input(format!("{}: not a metric report: {e}", path.display())))?;
    Ok(MetricReport {
        abs_rel: p.abs_rel,
        sq_rel: p.sq_rel,
        rmse: p.rmse,
        rmse_log: p.rmse_log,
        log10: p.log10,
        delta1: p.delta1,
        delta2: p.delta2,
        delta3: p.delta3,
        n_pixels: p.n_pixels,
    })
}
