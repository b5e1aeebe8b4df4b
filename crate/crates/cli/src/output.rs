use std::path::PathBuf;

use clap::ValueEnum;
use serde_json::{json, Value};

use crate::manifest::Manifest;
use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Csv,
}

/// A finished report: a JSON body, the same data flattened to CSV rows, and
/// a short human summary.
pub struct Report {
    pub name: &'static str,
    pub body: Value,
    pub csv: Vec<Vec<String>>,
    pub summary: String,
}

pub fn csv_text(rows: &[Vec<String>]) -> Result<String, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.write_record(r).map_err(|e| CliError::Io(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::Io(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| CliError::Io(e.to_string()))
}

/// Renders the report in `format`. The body never depends on the timestamp.
pub fn render(report: &Report, manifest: &Manifest, format: Format) -> Result<String, CliError> {
    match format {
        Format::Json => {
            let doc = json!({ "manifest": manifest.to_json(), "report": report.body });
            Ok(serde_json::to_string_pretty(&doc).expect("json values serialize") + "\n")
        }
        Format::Csv => Ok(manifest.csv_header() + &csv_text(&report.csv)?),
    }
}

/// With `--out`, writes `<name>.<ext>` there and prints the summary; without
/// it, prints the report itself.
pub fn emit(report: &Report, manifest: &Manifest, format: Format, out: &Option<PathBuf>) -> Result<(), CliError> {
    let text = render(report, manifest, format)?;
    match out {
        Some(dir) => {
            let ext = match format {
                Format::Json => "json",
                Format::Csv => "csv",
            };
            let path = dir.join(format!("{}.{ext}", report.name));
            write_file(&path, &text)?;
            print!("{}", report.summary);
            println!("wrote {}", path.display());
        }
        None => print!("{text}"),
    }
    Ok(())
}

pub fn write_file(path: &std::path::Path, text: &str) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| CliError::Io(format!("{}: {e}", parent.display())))?;
    }
    std::fs::write(path, text).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

pub fn ms(seconds: f64) -> f64 {
    seconds * 1e3
}
