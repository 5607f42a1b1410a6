//! Self-describing output artifacts for the CLI: every file embeds the run
//! configuration and tool version, CSV numbers carry 17 significant digits,
//! and JSON mirrors the same values. Writing is fully deterministic so a
//! repeated run produces byte-identical bytes.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde_json::{json, Value};

use crate::error::Result;

/// One cell of a tabular artifact.
#[derive(Debug, Clone)]
pub(crate) enum Field {
    Float(f64),
    Int(u64),
    Text(String),
}

impl Field {
    fn csv(&self) -> String {
        match self {
            // 17 significant digits: lossless binary64 round-trip.
            Field::Float(v) => format!("{v:.16e}"),
            Field::Int(v) => v.to_string(),
            // Descriptors may contain commas; always quote text fields.
            Field::Text(s) => format!("\"{}\"", s.replace('"', "\"\"")),
        }
    }

    fn json(&self) -> Value {
        match self {
            // JSON has no NaN/inf; null marks undefined cells.
            Field::Float(v) if !v.is_finite() => Value::Null,
            Field::Float(v) => json!(v),
            Field::Int(v) => json!(v),
            Field::Text(s) => json!(s),
        }
    }
}

/// A rectangular result set. Rows carry `(column, value)` pairs in output
/// order; the CSV view prints only `csv_columns` (JSON may carry extras,
/// e.g. ensemble diagnostics that would clutter a plot-ready CSV).
#[derive(Debug, Clone)]
pub(crate) struct Table {
    pub csv_columns: Vec<&'static str>,
    pub rows: Vec<Vec<(&'static str, Field)>>,
}

fn csv_document(config: &Value, table: &Table) -> String {
    let mut out = String::new();
    out.push_str(&format!("# spademux {}\n", crate::VERSION));
    out.push_str(&format!(
        "# config: {}\n",
        serde_json::to_string(config).expect("config serializes")
    ));
    out.push_str(&table.csv_columns.join(","));
    out.push('\n');
    for row in &table.rows {
        let cells: Vec<String> = table
            .csv_columns
            .iter()
            .map(|col| {
                row.iter()
                    .find(|(name, _)| name == col)
                    .map(|(_, f)| f.csv())
                    .unwrap_or_default()
            })
            .collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

fn json_document(config: &Value, table: &Table) -> String {
    let rows: Vec<Value> = table
        .rows
        .iter()
        .map(|row| {
            let mut obj = serde_json::Map::new();
            for (name, field) in row {
                obj.insert((*name).to_string(), field.json());
            }
            Value::Object(obj)
        })
        .collect();
    let doc = json!({
        "tool": "spademux",
        "version": crate::VERSION,
        "config": config,
        "rows": rows,
    });
    let mut s = serde_json::to_string_pretty(&doc).expect("document serializes");
    s.push('\n');
    s
}

/// Render a table in the requested format.
pub(crate) fn render_table(format: crate::cli::Format, config: &Value, table: &Table) -> String {
    match format {
        crate::cli::Format::Csv => csv_document(config, table),
        crate::cli::Format::Json => json_document(config, table),
    }
}

/// Wrap a non-tabular report (audit, estimation summary) with the standard
/// self-description envelope.
pub(crate) fn render_report(config: &Value, report: &Value) -> String {
    let doc = json!({
        "tool": "spademux",
        "version": crate::VERSION,
        "config": config,
        "report": report,
    });
    let mut s = serde_json::to_string_pretty(&doc).expect("document serializes");
    s.push('\n');
    s
}

/// Write to the path, or stdout when no path is given.
pub(crate) fn emit(out: Option<&Path>, content: &str) -> Result<()> {
    match out {
        Some(path) => fs::write(path, content)?,
        None => {
            let stdout = std::io::stdout();
            let mut lock = stdout.lock();
            lock.write_all(content.as_bytes())?;
        }
    }
    Ok(())
}
