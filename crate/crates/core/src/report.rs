//! Tabular and structured export of evaluation results.
//!
//! Floats are written in shortest round-trip form, so parsing an exported
//! file gives back the exact values.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::ReportFormat;
use crate::error::{Error, Result};
use crate::eval::EvalReport;

/// One row of a results table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub label: String,
    pub mean_accuracy: f64,
    pub ci95_halfwidth: f64,
    pub n_episodes: usize,
    pub fingerprint: String,
}

impl ReportRow {
    pub fn new(label: impl Into<String>, report: &EvalReport) -> Self {
        Self {
            label: label.into(),
            mean_accuracy: report.mean_accuracy,
            ci95_halfwidth: report.ci95_halfwidth,
            n_episodes: report.n_episodes,
            fingerprint: report.fingerprint.clone(),
        }
    }
}

impl ReportFormat {
    pub fn extension(self) -> &'static str {
        match self {
            ReportFormat::Csv => "csv",
            ReportFormat::Tsv => "tsv",
            ReportFormat::Json => "json",
        }
    }

    fn delimiter(self) -> Option<u8> {
        match self {
            ReportFormat::Csv => Some(b','),
            ReportFormat::Tsv => Some(b'\t'),
            ReportFormat::Json => None,
        }
    }
}

pub fn render(rows: &[ReportRow], format: ReportFormat) -> Result<String> {
    match format.delimiter() {
        None => serde_json::to_string_pretty(rows).map_err(|e| Error::parse("report", e)).map(|s| s + "\n"),
        Some(delim) => {
            let mut w = csv::WriterBuilder::new().delimiter(delim).from_writer(Vec::new());
            for row in rows {
                w.serialize(row).map_err(|e| Error::parse("report", e))?;
            }
            let bytes = w.into_inner().map_err(|e| Error::parse("report", e.error()))?;
            String::from_utf8(bytes).map_err(|e| Error::parse("report", e))
        }
    }
}

pub fn parse(text: &str, format: ReportFormat) -> Result<Vec<ReportRow>> {
    match format.delimiter() {
        None => serde_json::from_str(text).map_err(|e| Error::parse("report", e)),
        Some(delim) => csv::ReaderBuilder::new()
            .delimiter(delim)
            .from_reader(text.as_bytes())
            .deserialize()
            .map(|r| r.map_err(|e| Error::parse("report", e)))
            .collect(),
    }
}

/// Writes `<dir>/<stem>.<ext>` for every format and returns the paths.
pub fn export(rows: &[ReportRow], dir: &Path, stem: &str, formats: &[ReportFormat]) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    formats
        .iter()
        .map(|&f| {
            let path = dir.join(format!("{stem}.{}", f.extension()));
            std::fs::write(&path, render(rows, f)?).map_err(|e| Error::io(&path, e))?;
            Ok(path)
        })
        .collect()
}

pub fn read(path: &Path, format: ReportFormat) -> Result<Vec<ReportRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse(&text, format)
}

/// Human-readable table for the terminal.
pub fn pretty(rows: &[ReportRow]) -> String {
    let width = rows.iter().map(|r| r.label.len()).max().unwrap_or(0).max(5);
    let mut out = format!("{:<width$}  {:>8}  {:>7}  {:>6}\n", "model", "mean %", "± 95%", "n");
    for r in rows {
        out += &format!(
            "{:<width$}  {:>8.2}  {:>7.2}  {:>6}\n",
            r.label, r.mean_accuracy, r.ci95_halfwidth, r.n_episodes
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows() -> Vec<ReportRow> {
        vec![
            ReportRow {
                label: "baseline".into(),
                mean_accuracy: 41.123456789012345,
                ci95_halfwidth: 0.1 + 0.2,
                n_episodes: 600,
                fingerprint: "ab12".into(),
            },
            ReportRow {
                label: "imse+imfr".into(),
                mean_accuracy: 1.0 / 3.0,
                ci95_halfwidth: 0.0,
                n_episodes: 1,
                fingerprint: "ab12".into(),
            },
        ]
    }

    #[test]
    fn every_format_round_trips_exactly() {
        for f in [ReportFormat::Csv, ReportFormat::Tsv, ReportFormat::Json] {
            let text = render(&rows(), f).unwrap();
            assert_eq!(parse(&text, f).unwrap(), rows(), "{f:?}");
        }
    }

    #[test]
    fn csv_header_and_row() {
        let text = render(&rows()[..1], ReportFormat::Csv).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("label,mean_accuracy,ci95_halfwidth,n_episodes,fingerprint"));
        let row = lines.next().unwrap();
        assert!(row.starts_with("baseline,41.12345678901"), "{row}");
    }
}
