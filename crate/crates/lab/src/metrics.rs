//! metrics.csv: long-format rows, one metric per line.

use std::path::Path;

use covae_core::eval::{summarize, MetricReport};

use crate::error::{io_err, LabError, Result};
use crate::manifest::write_atomic;

pub const HEADER: [&str; 6] = ["model", "rho", "replicate", "metric", "value", "stderr"];

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub model: String,
    pub rho: f64,
    /// `None` marks a summary over replicates.
    pub replicate: Option<usize>,
    pub metric: String,
    pub value: f64,
    pub stderr: f64,
}

/// Per-replicate rows followed by one summary row per `(model, rho, metric)`.
pub fn with_summaries(reports: &[MetricReport]) -> Vec<MetricRow> {
    let row = |r: &MetricReport| MetricRow {
        model: r.model.clone(),
        rho: r.rho,
        replicate: r.replicate,
        metric: r.metric.clone(),
        value: r.value,
        stderr: r.stderr,
    };
    let mut out: Vec<MetricRow> = reports.iter().map(row).collect();
    out.extend(summarize(reports).iter().map(row));
    out
}

pub fn write(path: &Path, rows: &[MetricRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(HEADER)?;
    for r in rows {
        let rep = r.replicate.map_or_else(|| "all".to_string(), |i| i.to_string());
        w.write_record([
            r.model.clone(),
            r.rho.to_string(),
            rep,
            r.metric.clone(),
            r.value.to_string(),
            r.stderr.to_string(),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| io_err(path)(e.into_error()))?;
    write_atomic(path, &bytes)
}

pub fn read(path: &Path) -> Result<Vec<MetricRow>> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let mismatch = |message: String| LabError::SchemaMismatch {
        path: path.to_path_buf(),
        message,
    };
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let header = rdr.headers()?.clone();
    if header.iter().ne(HEADER) {
        return Err(mismatch(format!(
            "header is {:?}, expected {:?}",
            header.iter().collect::<Vec<_>>(),
            HEADER
        )));
    }
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = i + 2;
        let num = |col: usize| -> Result<f64> {
            rec[col]
                .parse()
                .map_err(|_| mismatch(format!("line {line}: {} {:?} is not a number", HEADER[col], &rec[col])))
        };
        let replicate = match &rec[2] {
            "all" => None,
            s => Some(
                s.parse()
                    .map_err(|_| mismatch(format!("line {line}: replicate {s:?} is neither an index nor \"all\"")))?,
            ),
        };
        rows.push(MetricRow {
            model: rec[0].to_string(),
            rho: num(1)?,
            replicate,
            metric: rec[3].to_string(),
            value: num(4)?,
            stderr: num(5)?,
        });
    }
    Ok(rows)
}
