//! Minimal CSV tables for experiment outputs.
//!
//! The experiment contract is "same config, same seed, same bytes", so cells
//! are written with `f64`'s shortest-roundtrip formatting and nothing here
//! depends on locale or platform line endings. Cells are plain tokens: any
//! comma, quote, or line break in a cell is a bug in the caller and is
//! rejected rather than quoted away.

use crate::error::{Error, Result};
use std::fmt::Write as _;
use std::path::Path;

#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

/// Shortest decimal string that parses back to exactly `v`.
pub fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

/// Cell used where a matrix excludes an entry (for example the diagonal of a
/// feature-transfer table).
pub const EXCLUDED: &str = "-";

fn check_cell(cell: &str) -> Result<()> {
    if cell.is_empty() {
        return Err(Error::Data("empty CSV cell".into()));
    }
    if cell.contains([',', '"', '\n', '\r']) {
        return Err(Error::Data(format!("CSV cell {cell:?} needs quoting, which this format forbids")));
    }
    Ok(())
}

impl Table {
    pub fn new(columns: &[&str]) -> Table {
        Table {
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push_row(&mut self, cells: Vec<String>) -> Result<()> {
        if cells.len() != self.columns.len() {
            return Err(Error::Data(format!(
                "row has {} cells, table has {} columns",
                cells.len(),
                self.columns.len()
            )));
        }
        for cell in &cells {
            check_cell(cell)?;
        }
        self.rows.push(cells);
        Ok(())
    }

    pub fn to_text(&self) -> Result<String> {
        let mut out = String::new();
        for col in &self.columns {
            check_cell(col)?;
        }
        let _ = writeln!(out, "{}", self.columns.join(","));
        for row in &self.rows {
            let _ = writeln!(out, "{}", row.join(","));
        }
        Ok(out)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(path, self.to_text()?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Table> {
        let text = std::fs::read_to_string(path)?;
        Table::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Table> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Data("CSV file has no header line".into()))?;
        let columns: Vec<String> = header.split(',').map(|c| c.to_string()).collect();
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate() {
            if line.is_empty() {
                continue;
            }
            let cells: Vec<String> = line.split(',').map(|c| c.to_string()).collect();
            if cells.len() != columns.len() {
                return Err(Error::Data(format!(
                    "CSV row {} has {} cells, header has {}",
                    i + 1,
                    cells.len(),
                    columns.len()
                )));
            }
            rows.push(cells);
        }
        Ok(Table { columns, rows })
    }

    pub fn column(&self, name: &str) -> Result<usize> {
        self.columns
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| Error::Data(format!("CSV has no column {name:?}")))
    }

    pub fn f64_at(&self, row: usize, name: &str) -> Result<f64> {
        let col = self.column(name)?;
        let cell = &self.rows[row][col];
        cell.parse::<f64>()
            .map_err(|_| Error::Data(format!("cell {cell:?} in column {name:?} is not a number")))
    }

    /// Whole column as numbers; excluded cells are skipped.
    pub fn f64_column(&self, name: &str) -> Result<Vec<f64>> {
        let col = self.column(name)?;
        let mut out = Vec::with_capacity(self.rows.len());
        for row in &self.rows {
            let cell = &row[col];
            if cell == EXCLUDED {
                continue;
            }
            out.push(cell.parse::<f64>().map_err(|_| {
                Error::Data(format!("cell {cell:?} in column {name:?} is not a number"))
            })?);
        }
        Ok(out)
    }
}
