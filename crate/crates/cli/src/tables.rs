//! CSV matrices and tables.

use std::path::Path;

use crate::error::CliError;

/// Writes a row-major `rows × cols` matrix with an `x0, x1, …` header.
pub fn write_matrix(path: &Path, rows: usize, cols: usize, data: &[f64]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record((0..cols).map(|c| format!("x{c}")))?;
    for r in 0..rows {
        w.write_record(data[r * cols..(r + 1) * cols].iter().map(|v| v.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a matrix written by [`write_matrix`]; returns `(rows, cols, data)`.
pub fn read_matrix(path: &Path) -> Result<(usize, usize, Vec<f64>), CliError> {
    let mut r = csv::Reader::from_path(path)?;
    let cols = r.headers()?.len();
    let mut data = Vec::new();
    let mut rows = 0;
    for rec in r.records() {
        let rec = rec?;
        if rec.len() != cols {
            return Err(CliError::Data(format!("{}: ragged row {rows}", path.display())));
        }
        for f in rec.iter() {
            data.push(
                f.parse::<f64>()
                    .map_err(|_| CliError::Data(format!("{}: bad number `{f}`", path.display())))?,
            );
        }
        rows += 1;
    }
    Ok((rows, cols, data))
}

/// Writes a header plus string rows.
pub fn write_table(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for row in rows {
        w.write_record(row)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a table as its header and rows of strings.
pub fn read_table(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>), CliError> {
    let mut r = csv::Reader::from_path(path)?;
    let header = r.headers()?.iter().map(str::to_string).collect();
    let rows = r
        .records()
        .map(|rec| rec.map(|r| r.iter().map(str::to_string).collect()))
        .collect::<Result<_, _>>()?;
    Ok((header, rows))
}
