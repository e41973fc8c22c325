//! Numeric CSV tables: a header row of column names, then one numeric row
//! per observation.

use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub names: Vec<String>,
    /// `rows × names.len()`.
    pub values: DMatrix<f64>,
}

impl Table {
    pub fn read(path: &Path) -> CliResult<Table> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Input(format!("{}: cannot read: {e}", path.display())))?;
        Table::parse(&text).map_err(|e| match e {
            CliError::Input(msg) => CliError::Input(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn parse(text: &str) -> CliResult<Table> {
        let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
        let names: Vec<String> = reader
            .headers()
            .map_err(|e| CliError::Input(format!("bad header: {e}")))?
            .iter()
            .map(|h| h.trim().to_string())
            .collect();
        if names.is_empty() || names.iter().all(String::is_empty) {
            return Err(CliError::Input("empty CSV: no header row".into()));
        }
        for (c, name) in names.iter().enumerate() {
            if name.is_empty() {
                return Err(CliError::Input(format!("column {} has an empty name", c + 1)));
            }
            if names[..c].contains(name) {
                return Err(CliError::Input(format!("duplicate column name '{name}'")));
            }
        }
        let mut flat = Vec::new();
        let mut rows = 0;
        for record in reader.records() {
            let record = record.map_err(|e| CliError::Input(format!("malformed CSV: {e}")))?;
            // header is line 1
            let line = record.position().map_or(rows + 2, |p| p.line() as usize);
            for (c, cell) in record.iter().enumerate() {
                let value = cell.trim().parse::<f64>().map_err(|_| {
                    CliError::Input(format!(
                        "line {line} (data row {}), column '{}': '{cell}' is not a number",
                        rows + 1,
                        names[c]
                    ))
                })?;
                if !value.is_finite() {
                    return Err(CliError::Input(format!(
                        "line {line} (data row {}), column '{}': non-finite value '{cell}'",
                        rows + 1,
                        names[c]
                    )));
                }
                flat.push(value);
            }
            rows += 1;
        }
        if rows == 0 {
            return Err(CliError::Input("CSV has a header but no data rows".into()));
        }
        Ok(Table {
            values: DMatrix::from_row_slice(rows, names.len(), &flat),
            names,
        })
    }

    pub fn column_index(&self, name: &str) -> CliResult<usize> {
        self.names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| CliError::Input(format!("column '{name}' not found (have: {})", self.names.join(", "))))
    }

    pub fn column(&self, index: usize) -> DVector<f64> {
        self.values.column(index).into_owned()
    }

    /// All columns except `skip`, with their names.
    pub fn without(&self, skip: usize) -> (Vec<String>, DMatrix<f64>) {
        let keep: Vec<usize> = (0..self.names.len()).filter(|&c| c != skip).collect();
        let names = keep.iter().map(|&c| self.names[c].clone()).collect();
        (names, self.values.select_columns(&keep))
    }
}

/// Writes `matrix` with `names` as a header, using shortest round-trip
/// formatting so the values parse back exactly.
pub fn write_matrix_csv(path: &Path, names: &[String], matrix: &DMatrix<f64>) -> CliResult<()> {
    let mut writer = csv::Writer::from_path(path).map_err(|e| CliError::Io(e.into()))?;
    writer.write_record(names).map_err(|e| CliError::Io(e.into()))?;
    for row in matrix.row_iter() {
        writer
            .write_record(row.iter().map(|v| v.to_string()))
            .map_err(|e| CliError::Io(e.into()))?;
    }
    writer.flush()?;
    Ok(())
}
