//! CSV emission with an embedded, machine-readable provenance header.
//!
//! Every output starts with the producing job's TOML serialization as '#'
//! comment lines, so a result file is self-describing: strip the comment
//! prefix, feed the rest to the config parser, re-run. Files appear
//! atomically (temp file + rename in the same directory), so a failed run
//! never leaves a partial report behind.

use std::io::Write as _;
use std::path::Path;

use crate::config::RunConfig;
use crate::error::{Error, Result};

/// Formats a float with 10 significant digits, the precision used in all
/// report cells.
pub fn fmt_g10(v: f64) -> String {
    format!("{v:.9e}")
}

fn escape_cell(cell: &str) -> String {
    if cell.contains(',') || cell.contains('"') || cell.contains('\n') {
        format!("\"{}\"", cell.replace('"', "\"\""))
    } else {
        cell.to_string()
    }
}

/// An in-memory CSV table; rows are rendered in insertion order.
pub struct CsvReport {
    columns: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl CsvReport {
    pub fn new<I, S>(columns: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        CsvReport {
            columns: columns.into_iter().map(Into::into).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push_row(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.columns.len(), "row width mismatch");
        self.rows.push(row);
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Full file contents: '#'-prefixed config header, column line, rows.
    pub fn render(&self, config: &RunConfig) -> String {
        let mut out = String::new();
        for line in config.to_toml().lines() {
            if line.is_empty() {
                out.push_str("#\n");
            } else {
                out.push_str("# ");
                out.push_str(line);
                out.push('\n');
            }
        }
        out.push_str(&self.columns.join(","));
        out.push('\n');
        for row in &self.rows {
            let cells: Vec<String> = row.iter().map(|c| escape_cell(c)).collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }

    /// Writes the report; the file appears only if every byte made it.
    pub fn write(&self, config: &RunConfig, path: &Path) -> Result<()> {
        let text = self.render(config);
        let file_name = path.file_name().ok_or_else(|| {
            Error::InvalidArgument(format!("output path {} has no file name", path.display()))
        })?;
        let mut tmp_name = file_name.to_os_string();
        tmp_name.push(".tmp");
        let tmp = path.with_file_name(tmp_name);
        {
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(text.as_bytes())?;
            f.sync_all()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }
}

/// Recovers the job description embedded in a report's comment header.
pub fn read_embedded_config(text: &str) -> Result<RunConfig> {
    let mut toml_text = String::new();
    let mut saw_header = false;
    for line in text.lines() {
        let Some(rest) = line.strip_prefix('#') else {
            break;
        };
        saw_header = true;
        toml_text.push_str(rest.strip_prefix(' ').unwrap_or(rest));
        toml_text.push('\n');
    }
    if !saw_header {
        return Err(Error::Parse("report has no config header".into()));
    }
    RunConfig::from_toml(&toml_text)
}
