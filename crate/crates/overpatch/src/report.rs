//! CSV and JSON emission for experiment reports.
//!
//! Rates go to `report.csv` (one row per experiment and scope), pixel-count
//! histograms to `histograms.csv` (binned at width 100), and the complete
//! [`EvalReport`] structures to `report.json`. All files are written
//! atomically.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::eval::EvalReport;
use crate::io_util::write_atomic;

#[derive(Debug, thiserror::Error)]
pub enum ReportError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Csv { path: PathBuf, message: String },
}

/// One `report.csv` row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub exp_id: String,
    pub scope: String,
    pub n: usize,
    pub element_size_m: f64,
    pub frames_attacked: usize,
    pub success_rate: f64,
    pub error_rate: f64,
    pub sequence_success_rate: f64,
    pub sequence_error_rate: f64,
}

impl From<&EvalReport> for ReportRow {
    fn from(r: &EvalReport) -> Self {
        Self {
            exp_id: r.experiment_id.clone(),
            scope: r.scope.clone(),
            n: r.n,
            element_size_m: r.element_size_m,
            frames_attacked: r.frames_attacked,
            success_rate: r.targeted_success_rate,
            error_rate: r.total_error_rate,
            sequence_success_rate: r.sequence_success_rate,
            sequence_error_rate: r.sequence_error_rate,
        }
    }
}

/// One `histograms.csv` row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramRow {
    pub exp_id: String,
    pub scope: String,
    pub outcome: String,
    pub bin_lo: usize,
    pub count: usize,
}

fn csv_bytes<R: Serialize>(rows: &[R]) -> Vec<u8> {
    let mut writer = csv::Writer::from_writer(Vec::new());
    for row in rows {
        writer.serialize(row).expect("rows serialize to CSV");
    }
    writer.into_inner().expect("in-memory writer")
}

/// Writes `report.csv`, `histograms.csv` and `report.json` under `dir`.
pub fn write_reports(dir: &Path, reports: &[EvalReport]) -> Result<(), ReportError> {
    std::fs::create_dir_all(dir).map_err(|source| ReportError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let rows: Vec<ReportRow> = reports.iter().map(ReportRow::from).collect();
    let mut hist_rows = Vec::new();
    for report in reports {
        for (outcome, bins) in [
            ("success", &report.success_pixel_histogram),
            ("failure", &report.failure_pixel_histogram),
        ] {
            for bin in bins {
                hist_rows.push(HistogramRow {
                    exp_id: report.experiment_id.clone(),
                    scope: report.scope.clone(),
                    outcome: outcome.to_string(),
                    bin_lo: bin.bin_lo,
                    count: bin.count,
                });
            }
        }
    }

    let write = |name: &str, bytes: &[u8]| -> Result<(), ReportError> {
        let path = dir.join(name);
        write_atomic(&path, bytes).map_err(|source| ReportError::Io { path, source })
    };
    write("report.csv", &csv_bytes(&rows))?;
    write("histograms.csv", &csv_bytes(&hist_rows))?;
    write(
        "report.json",
        &serde_json::to_vec_pretty(reports).expect("reports serialize"),
    )
}

/// Parses `report.csv` back; the round trip reproduces every rate at the
/// printed precision.
pub fn read_report_csv(path: &Path) -> Result<Vec<ReportRow>, ReportError> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| ReportError::Csv {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    reader
        .deserialize()
        .collect::<Result<Vec<ReportRow>, _>>()
        .map_err(|e| ReportError::Csv {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
}
